//! Training and validation loop.
//!
//! Every epoch draws a seeded plan (utterance order and tempo rates), so the
//! number of steps in the whole run is known up front and any step can be
//! reconstructed after a resume.

use std::fs::{File, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::audio::{segment, segment_count, tempo_length, tempo_perturb, CorpusPair, SAMPLE_RATE, TEMPO_RANGE};
use crate::autograd::{Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::loss::{weighted_total_loss, LossReport};
use crate::model::Manner;
use crate::nn::Ctx;
use crate::optim::onecycle_lr;
use crate::tensor::Tensor;

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const LOG_FILE: &str = "train.log";

/// Noisy and clean segments, both `[B, 1, T]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub noisy: Tensor<f32>,
    pub clean: Tensor<f32>,
}

impl Batch {
    pub fn from_segments(pairs: &[(Vec<f32>, Vec<f32>)]) -> Result<Self> {
        let t = pairs.first().map(|p| p.0.len()).unwrap_or(0);
        let b = pairs.len();
        let stack = |f: &dyn Fn(&(Vec<f32>, Vec<f32>)) -> &Vec<f32>| -> Result<Tensor<f32>> {
            let mut data = Vec::with_capacity(b * t);
            for p in pairs {
                data.extend_from_slice(f(p));
            }
            Tensor::new(&[b, 1, t], data)
        };
        Ok(Batch { noisy: stack(&|p| &p.0)?, clean: stack(&|p| &p.1)? })
    }

    pub fn len(&self) -> usize {
        self.noisy.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Utterance order and per-utterance tempo rate of one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochPlan {
    pub order: Vec<usize>,
    pub rates: Vec<f64>,
}

pub fn epoch_plan(utterances: usize, epoch: usize, seed: u64, tempo: bool) -> EpochPlan {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..utterances).collect();
    order.shuffle(&mut rng);
    let rates = order
        .iter()
        .map(|_| if tempo { rng.gen_range(TEMPO_RANGE.0..=TEMPO_RANGE.1) } else { 1.0 })
        .collect();
    EpochPlan { order, rates }
}

/// Tempo-perturbed, segmented and batched pairs in plan order. Noisy and
/// clean members share the rate and window positions.
pub fn epoch_batches(pairs: &[CorpusPair], plan: &EpochPlan, seg: usize, hop: usize, batch_size: usize) -> Result<Vec<Batch>> {
    let per_utt: Vec<Vec<(Vec<f32>, Vec<f32>)>> = plan
        .order
        .par_iter()
        .zip(&plan.rates)
        .map(|(&i, &rate)| {
            let p = &pairs[i];
            let noisy = segment(&tempo_perturb(&p.noisy.samples, rate)?, seg, hop)?;
            let clean = segment(&tempo_perturb(&p.clean.samples, rate)?, seg, hop)?;
            Ok(noisy.into_iter().zip(clean).collect())
        })
        .collect::<Result<_>>()?;
    let all: Vec<(Vec<f32>, Vec<f32>)> = per_utt.into_iter().flatten().collect();
    all.chunks(batch_size).map(Batch::from_segments).collect()
}

/// Batches [`epoch_batches`] would produce, from lengths alone.
pub fn epoch_steps(lengths: &[usize], plan: &EpochPlan, seg: usize, hop: usize, batch_size: usize) -> usize {
    let segments: usize = plan
        .order
        .iter()
        .zip(&plan.rates)
        .map(|(&i, &rate)| segment_count(tempo_length(lengths[i], rate), seg, hop))
        .sum();
    segments.div_ceil(batch_size)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    /// Index of the step, counting from 0.
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub report: LossReport,
}

impl StepRecord {
    pub fn log_line(&self) -> String {
        format!("step={} epoch={} lr={:.6e} {}", self.step, self.epoch, self.lr, self.report.log_fields())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub val_loss: f64,
    /// This epoch improved on every earlier one.
    pub best: bool,
}

impl EpochRecord {
    pub fn log_line(&self) -> String {
        format!("epoch={} val_loss={:.6} best={}", self.epoch, self.val_loss, self.best)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainSummary {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Writes best/last checkpoints and the log here.
    pub out_dir: Option<PathBuf>,
    /// Stop once this many steps have been taken in total.
    pub stop_after: Option<usize>,
}

pub struct Trainer {
    pub model: Manner,
    pub state: Checkpoint,
    train: Vec<CorpusPair>,
    valid: Vec<CorpusPair>,
    steps_per_epoch: Vec<usize>,
    loaded: Option<(usize, Vec<Batch>)>,
}

impl Trainer {
    /// Fresh model and optimizer. An empty `valid` set makes the training
    /// pairs double as the validation set.
    pub fn new(config: &RunConfig, train: Vec<CorpusPair>, valid: Vec<CorpusPair>) -> Result<Self> {
        let (_, state) = Checkpoint::initial(config)?;
        Self::resume(state, train, valid)
    }

    pub fn resume(state: Checkpoint, train: Vec<CorpusPair>, valid: Vec<CorpusPair>) -> Result<Self> {
        let model = state.model()?;
        if train.is_empty() {
            return Err(Error::Corpus("training corpus is empty".into()));
        }
        for p in train.iter().chain(&valid) {
            p.clean
                .require_rate(SAMPLE_RATE)
                .map_err(|e| Error::Corpus(format!("`{}`: {e}", p.id)))?;
        }
        let cfg = &state.config.train;
        let (seg, hop) = cfg.segment_samples()?;
        let lengths: Vec<usize> = train.iter().map(CorpusPair::len).collect();
        let steps_per_epoch = (0..cfg.epochs)
            .map(|e| epoch_steps(&lengths, &epoch_plan(train.len(), e, cfg.seed, cfg.tempo), seg, hop, cfg.batch_size))
            .collect();
        let valid = if valid.is_empty() { train.clone() } else { valid };
        let trainer = Trainer { model, state, train, valid, steps_per_epoch, loaded: None };
        if trainer.state.step as usize > trainer.total_steps() {
            return Err(Error::Checkpoint(format!(
                "checkpoint is at step {} of a {}-step run",
                trainer.state.step,
                trainer.total_steps()
            )));
        }
        Ok(trainer)
    }

    pub fn config(&self) -> &RunConfig {
        &self.state.config
    }

    pub fn step_count(&self) -> usize {
        self.state.step as usize
    }

    pub fn total_steps(&self) -> usize {
        self.steps_per_epoch.iter().sum()
    }

    pub fn steps_per_epoch(&self) -> &[usize] {
        &self.steps_per_epoch
    }

    /// `(epoch, batch index within it)` of a global step.
    pub fn position(&self, step: usize) -> Option<(usize, usize)> {
        let mut rest = step;
        for (e, &n) in self.steps_per_epoch.iter().enumerate() {
            if rest < n {
                return Some((e, rest));
            }
            rest -= n;
        }
        None
    }

    pub fn lr_at(&self, step: usize) -> Result<f64> {
        let sched = self.config().train.schedule();
        if self.config().train.cycle_per_epoch {
            let (e, i) = self
                .position(step)
                .ok_or_else(|| Error::InvalidArgument(format!("step {step} is past the end of training")))?;
            onecycle_lr(i, self.steps_per_epoch[e], &sched)
        } else {
            onecycle_lr(step, self.total_steps(), &sched)
        }
    }

    fn batch(&mut self, epoch: usize, index: usize) -> Result<Batch> {
        if self.loaded.as_ref().map(|l| l.0) != Some(epoch) {
            let cfg = &self.state.config.train;
            let (seg, hop) = cfg.segment_samples()?;
            let plan = epoch_plan(self.train.len(), epoch, cfg.seed, cfg.tempo);
            self.loaded = Some((epoch, epoch_batches(&self.train, &plan, seg, hop, cfg.batch_size)?));
        }
        Ok(self.loaded.as_ref().expect("epoch loaded").1[index].clone())
    }

    /// Forward, loss, backward and one Adam step on `batch` at `lr`.
    pub fn train_on(&mut self, batch: &Batch, lr: f64) -> Result<LossReport> {
        let step = self.step_count();
        let tape = Tape::new();
        let ctx = Ctx::train(&tape, &self.state.params);
        let x = Var::constant(batch.noisy.clone());
        let y = Var::constant(batch.clean.clone());
        let estimate = self.model.forward(&ctx, &x)?;
        let (loss, report) = weighted_total_loss(&tape, &x, &y, &estimate, &self.state.config.loss)?;
        if !report.total.is_finite() {
            return Err(Error::Diverged { step, detail: format!("loss is {} ({})", report.total, report.log_fields()) });
        }
        let bound = ctx.finish();
        let grads = bound.gradients(&tape.backward(&loss)?);
        if let Some(i) = grads.iter().position(|g| !g.all_finite()) {
            return Err(Error::Diverged {
                step,
                detail: format!("non-finite gradient for `{}`", self.state.params.name(i)),
            });
        }
        self.state.optimizer.step(&mut self.state.params, &grads, lr)?;
        self.state.params.apply_bn_updates(bound.bn_updates)?;
        self.state.step += 1;
        Ok(report)
    }

    /// Takes the next scheduled step.
    pub fn step(&mut self) -> Result<StepRecord> {
        let step = self.step_count();
        let (epoch, index) = self
            .position(step)
            .ok_or_else(|| Error::InvalidArgument("training already finished".into()))?;
        let lr = self.lr_at(step)?;
        let batch = self.batch(epoch, index)?;
        let report = self.train_on(&batch, lr)?;
        Ok(StepRecord { step, epoch, lr, report })
    }

    /// Mean weighted loss over all validation segments, running statistics.
    pub fn validate(&self) -> Result<f64> {
        let cfg = &self.state.config;
        let (seg, hop) = cfg.train.segment_samples()?;
        let plan = EpochPlan { order: (0..self.valid.len()).collect(), rates: vec![1.0; self.valid.len()] };
        let batches = epoch_batches(&self.valid, &plan, seg, hop, cfg.train.batch_size)?;
        let (mut sum, mut count) = (0.0, 0usize);
        for b in &batches {
            let tape = Tape::new();
            let ctx = Ctx::eval(&tape, &self.state.params);
            let x = Var::constant(b.noisy.clone());
            let estimate = self.model.forward(&ctx, &x)?;
            let (_, report) = weighted_total_loss(&tape, &x, &Var::constant(b.clean.clone()), &estimate, &cfg.loss)?;
            sum += report.total * b.len() as f64;
            count += b.len();
        }
        Ok(sum / count.max(1) as f64)
    }

    /// Trains to the end of the schedule (or `stop_after`), validating after
    /// every epoch and keeping the best checkpoint by validation loss.
    pub fn run(&mut self, opts: &RunOptions) -> Result<TrainSummary> {
        let mut log = match &opts.out_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                Some(OpenOptions::new().create(true).append(true).open(dir.join(LOG_FILE))?)
            }
            None => None,
        };
        let stop = opts.stop_after.unwrap_or(usize::MAX).min(self.total_steps());
        let mut summary = TrainSummary::default();
        while self.step_count() < stop {
            let rec = self.step()?;
            emit(&mut log, &rec.log_line())?;
            let (epoch, index) = (rec.epoch, rec.step + 1 - self.first_step_of(rec.epoch));
            summary.steps.push(rec);
            if index == self.steps_per_epoch[epoch] {
                let val_loss = self.validate()?;
                if !val_loss.is_finite() {
                    return Err(Error::Diverged { step: self.step_count(), detail: format!("validation loss is {val_loss}") });
                }
                let best = self.state.best_val.is_none_or(|b| val_loss < b);
                if best {
                    self.state.best_val = Some(val_loss);
                }
                let ep = EpochRecord { epoch, val_loss, best };
                emit(&mut log, &ep.log_line())?;
                summary.epochs.push(ep);
                if let Some(dir) = &opts.out_dir {
                    if best {
                        self.state.save(dir.join(BEST_CHECKPOINT))?;
                    }
                    self.state.save(dir.join(LAST_CHECKPOINT))?;
                }
            }
        }
        if let Some(dir) = &opts.out_dir {
            self.state.save(dir.join(LAST_CHECKPOINT))?;
        }
        Ok(summary)
    }

    fn first_step_of(&self, epoch: usize) -> usize {
        self.steps_per_epoch[..epoch].iter().sum()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.state.save(path)
    }
}

fn emit(log: &mut Option<File>, line: &str) -> Result<()> {
    log::info!("{line}");
    if let Some(f) = log {
        writeln!(f, "{line}")?;
    }
    Ok(())
}
