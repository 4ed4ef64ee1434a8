use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use manner::audio::{list_wavs, pair_corpus, read_wav, write_wav, AudioClip, CorpusPair, SAMPLE_RATE};
use manner::bench::{comparison_table, default_lengths, run_bench, tune_allocator, BenchReport};
use manner::metrics::si_snr;
use manner::trainer::{RunOptions, Trainer};
use manner::{build_model, Checkpoint, Error, Manner, ModelConfig, ParameterTree, Result, RunConfig, Tensor, Variant};
use rayon::prelude::*;

const DEFAULT_OUT_DIR: &str = "runs";

pub fn train(
    config: &Path,
    variant: Option<Variant>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    resume: Option<PathBuf>,
) -> Result<()> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(v) = variant {
        cfg.model.variant = v;
    }
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    if out.is_some() {
        cfg.data.out_dir = out;
    }
    cfg.validate_for_training()?;
    let out_dir = cfg.data.out_dir.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR));

    let d = &cfg.data;
    let train_pairs = pair_corpus(d.noisy_dir.as_ref().expect("validated"), d.clean_dir.as_ref().expect("validated"))?;
    let valid_pairs = match (&d.valid_noisy_dir, &d.valid_clean_dir) {
        (Some(n), Some(c)) => pair_corpus(n, c)?,
        _ => Vec::new(),
    };
    log::info!("{} training pairs, {} validation pairs", train_pairs.len(), valid_pairs.len());

    let mut trainer = match resume {
        Some(path) => {
            let mut ck = Checkpoint::load(&path)?;
            if ck.config.model != cfg.model || ck.config.train != cfg.train || ck.config.loss != cfg.loss {
                return Err(Error::Config(format!(
                    "{} was trained with a different [model], [train] or [loss] configuration",
                    path.display()
                )));
            }
            ck.config.data = cfg.data.clone();
            Trainer::resume(ck, train_pairs, valid_pairs)?
        }
        None => Trainer::new(&cfg, train_pairs, valid_pairs)?,
    };
    log::info!(
        "variant={} parameters={} total_steps={} start_step={}",
        cfg.model.variant,
        trainer.state.params.num_parameters(),
        trainer.total_steps(),
        trainer.step_count()
    );
    let summary = trainer.run(&RunOptions { out_dir: Some(out_dir.clone()), stop_after: None })?;
    println!(
        "trained {} steps; best validation loss {:.6}; checkpoints in {}",
        summary.steps.len(),
        trainer.state.best_val.unwrap_or(f64::NAN),
        out_dir.display()
    );
    Ok(())
}

fn load_model(path: &Path) -> Result<(Manner, ParameterTree<f32>)> {
    let ck = Checkpoint::load(path)?;
    let model = ck.model()?;
    Ok((model, ck.params))
}

fn enhance_clip(model: &Manner, params: &ParameterTree<f32>, clip: &AudioClip) -> Result<AudioClip> {
    clip.require_rate(SAMPLE_RATE)?;
    let x = Tensor::from_slice(&[1, 1, clip.len()], &clip.samples)?;
    let y = model.enhance(params, &x)?;
    AudioClip::new(y.data().iter().map(|v| v.clamp(-1.0, 1.0)).collect(), clip.sample_rate)
}

pub fn enhance(checkpoint: &Path, input: &Path, out: &Path) -> Result<()> {
    let (model, params) = load_model(checkpoint)?;
    let files: Vec<(String, PathBuf)> = if input.is_dir() {
        list_wavs(input)?.into_iter().collect()
    } else {
        let name = input
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::Audio(format!("{}: not a file name", input.display())))?;
        vec![(name.to_string(), input.to_path_buf())]
    };
    if files.is_empty() {
        return Err(Error::Audio(format!("no WAV files in {}", input.display())));
    }
    std::fs::create_dir_all(out)?;
    files.par_iter().try_for_each(|(name, path)| -> Result<()> {
        let clip = read_wav(path)?;
        let enhanced = enhance_clip(&model, &params, &clip).map_err(|e| match e {
            Error::Audio(m) => Error::Audio(format!("{}: {m}", path.display())),
            e => e,
        })?;
        write_wav(out.join(name), &enhanced)
    })?;
    println!("enhanced {} file(s) into {}", files.len(), out.display());
    Ok(())
}

struct EvalRow {
    id: String,
    noisy: f64,
    enhanced: f64,
}

pub fn eval(checkpoint: &Path, noisy_dir: &Path, clean_dir: &Path, out: Option<&Path>) -> Result<()> {
    let (model, params) = load_model(checkpoint)?;
    let pairs = pair_corpus(noisy_dir, clean_dir)?;
    let rows = pairs
        .par_iter()
        .map(|p: &CorpusPair| {
            let enhanced = enhance_clip(&model, &params, &p.noisy)?;
            Ok(EvalRow {
                id: p.id.clone(),
                noisy: si_snr(&p.noisy.samples, &p.clean.samples)?,
                enhanced: si_snr(&enhanced.samples, &p.clean.samples)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let table = eval_table(&rows);
    print!("{table}");
    if let Some(path) = out {
        std::fs::write(path, table)?;
    }
    Ok(())
}

fn eval_table(rows: &[EvalRow]) -> String {
    let mut s = String::from("id,si_snr_noisy_db,si_snr_enhanced_db,improvement_db\n");
    for r in rows {
        let _ = writeln!(s, "{},{:.3},{:.3},{:.3}", r.id, r.noisy, r.enhanced, r.enhanced - r.noisy);
    }
    let n = rows.len().max(1) as f64;
    let mean = |f: &dyn Fn(&EvalRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
    let (mn, me) = (mean(&|r| r.noisy), mean(&|r| r.enhanced));
    let _ = writeln!(s, "mean,{mn:.3},{me:.3},{:.3}", me - mn);
    s
}

pub fn bench(
    config: Option<&Path>,
    checkpoint: Option<&Path>,
    variant: Option<Variant>,
    lengths: &[f64],
    runs: usize,
    out: Option<&Path>,
) -> Result<()> {
    let lengths = if lengths.is_empty() { default_lengths() } else { lengths.to_vec() };
    if runs < manner::bench::MIN_RUNS {
        return Err(Error::Config(format!("--runs must be at least {}", manner::bench::MIN_RUNS)));
    }
    if lengths.iter().any(|&l| !(l > 0.0)) || lengths.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!("--lengths must be positive and strictly increasing: {lengths:?}")));
    }
    tune_allocator();
    let mut reports: Vec<BenchReport> = Vec::new();
    if let Some(path) = checkpoint {
        let ck = Checkpoint::load(path)?;
        let model = ck.model()?;
        let label = ck.config.model.variant.to_string();
        reports.push(run_bench(&label, &model, &ck.params, &lengths, runs)?);
    } else {
        let base = match config {
            Some(p) => RunConfig::load(p)?.model,
            None => ModelConfig::default(),
        };
        let variants = variant.map_or(vec![Variant::Full, Variant::Small], |v| vec![v]);
        let configs: Vec<ModelConfig> = variants.iter().map(|&v| ModelConfig { variant: v, ..base.clone() }).collect();
        configs.iter().try_for_each(ModelConfig::validate)?;
        for cfg in &configs {
            let (model, params) = build_model::<f32>(cfg, 0)?;
            log::info!("benchmarking {} ({} parameters)", cfg.variant, params.num_parameters());
            reports.push(run_bench(&cfg.variant.to_string(), &model, &params, &lengths, runs)?);
        }
    }
    eprint!("{}", comparison_table(&reports));
    match out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            for r in &reports {
                std::fs::write(dir.join(format!("bench_{}.csv", r.label)), r.to_csv())?;
            }
        }
        None if reports.len() == 1 => print!("{}", reports[0].to_csv()),
        None => {
            for r in &reports {
                print!("# variant={}\n{}", r.label, r.to_csv());
            }
        }
    }
    Ok(())
}
