use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use manner::audio::{read_wav, write_wav, AudioClip, SAMPLE_RATE};
use manner::{Checkpoint, RunConfig, Variant};

fn manner(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_manner"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap_or(-1)
}

fn tone(len: usize, f0: f64, rate: u32, noise: f32) -> AudioClip {
    let samples = (0..len)
        .map(|i| {
            let t = i as f64 / rate as f64;
            let s: f64 = (1..=20).map(|h| (2.0 * PI * f0 * h as f64 * t).sin() / h as f64).sum();
            let dither = ((i * 7919 % 1000) as f32 / 1000.0 - 0.5) * 2.0 * noise;
            (0.2 * s) as f32 + dither
        })
        .collect();
    AudioClip::new(samples, rate).unwrap()
}

/// Three noisy/clean pairs of a quarter to half a second.
fn fixture(root: &Path) -> (PathBuf, PathBuf) {
    let (noisy, clean) = (root.join("noisy"), root.join("clean"));
    std::fs::create_dir_all(&noisy).unwrap();
    std::fs::create_dir_all(&clean).unwrap();
    for (k, name) in ["a.wav", "b.wav", "c.wav"].iter().enumerate() {
        let len = 4000 + 2000 * k;
        write_wav(clean.join(name), &tone(len, 120.0 + 40.0 * k as f64, SAMPLE_RATE, 0.0)).unwrap();
        write_wav(noisy.join(name), &tone(len, 120.0 + 40.0 * k as f64, SAMPLE_RATE, 0.05)).unwrap();
    }
    (noisy, clean)
}

fn toy_config(root: &Path, noisy: &Path, clean: &Path) -> PathBuf {
    let text = format!(
        r#"
[model]
channels = 12
depth = 2
chunk = 16

[train]
epochs = 2
batch_size = 2
lr_max = 1e-3
segment_seconds = 0.25
hop_seconds = 0.125

[data]
noisy_dir = "{}"
clean_dir = "{}"
"#,
        noisy.display(),
        clean.display()
    );
    let path = root.join("toy.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn toy_checkpoint(root: &Path) -> PathBuf {
    let mut cfg = RunConfig::default();
    cfg.model.channels = 12;
    cfg.model.depth = 2;
    cfg.model.chunk = 16;
    let (_, ck) = Checkpoint::initial(&cfg).unwrap();
    let path = root.join("toy.ckpt");
    ck.save(&path).unwrap();
    path
}

#[test]
fn train_writes_both_checkpoints_and_a_log() {
    let dir = tempfile::tempdir().unwrap();
    let (noisy, clean) = fixture(dir.path());
    let cfg = toy_config(dir.path(), &noisy, &clean);
    let out = dir.path().join("run");
    let res = manner(&["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    for f in ["best.ckpt", "last.ckpt", "train.log"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let last = Checkpoint::load(out.join("last.ckpt")).unwrap();
    assert_eq!(last.config.model.variant, Variant::Full);
    assert!(last.step > 0);
    let log = std::fs::read_to_string(out.join("train.log")).unwrap();
    assert!(log.contains("step=0 ") && log.contains("epoch=1 val_loss="));
}

#[test]
fn variant_and_seed_flags_reach_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let (noisy, clean) = fixture(dir.path());
    let cfg = toy_config(dir.path(), &noisy, &clean);
    let out = dir.path().join("run");
    let res = manner(&[
        "train", "--config", cfg.to_str().unwrap(), "--variant", "small", "--seed", "11", "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let ck = Checkpoint::load(out.join("best.ckpt")).unwrap();
    assert_eq!(ck.config.model.variant, Variant::Small);
    assert_eq!(ck.config.train.seed, 11);
    assert!(ck.params.iter().all(|(_, name, _, _)| !name.starts_with("encoder.1.ma")));
}

#[test]
fn config_errors_exit_before_any_work() {
    let dir = tempfile::tempdir().unwrap();
    let (noisy, clean) = fixture(dir.path());
    let cfg = toy_config(dir.path(), &noisy, &clean);
    let text = std::fs::read_to_string(&cfg).unwrap();
    let out = dir.path().join("run");

    let missing = dir.path().join("missing.toml");
    std::fs::write(&missing, text.replace(&clean.display().to_string(), "/nonexistent/clean")).unwrap();
    let res = manner(&["train", "--config", missing.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&res), 2);
    assert!(String::from_utf8_lossy(&res.stderr).contains("clean_dir"));
    assert!(!out.exists());

    let unknown = dir.path().join("unknown.toml");
    std::fs::write(&unknown, text.replace("depth = 2", "depht = 2")).unwrap();
    let res = manner(&["train", "--config", unknown.to_str().unwrap()]);
    assert_eq!(code(&res), 2);

    let res = manner(&["train", "--config", dir.path().join("nope.toml").to_str().unwrap()]);
    assert_eq!(code(&res), 2);

    let res = Command::new(env!("CARGO_BIN_EXE_manner"))
        .args(["bench", "--variant", "small", "--lengths", "0.1"])
        .env("MANNER_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&res), 2);
}

#[test]
fn enhance_preserves_length_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = toy_checkpoint(dir.path());
    let input = dir.path().join("long.wav");
    // 7.3 s
    write_wav(&input, &tone(116_800, 150.0, SAMPLE_RATE, 0.05)).unwrap();
    let mut outputs = Vec::new();
    for run in ["o1", "o2"] {
        let out = dir.path().join(run);
        let res = manner(&["enhance", "--checkpoint", ckpt.to_str().unwrap(), "--out", out.to_str().unwrap(), input.to_str().unwrap()]);
        assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
        let clip = read_wav(out.join("long.wav")).unwrap();
        assert_eq!(clip.len(), 116_800);
        assert_eq!(clip.sample_rate, SAMPLE_RATE);
        assert!(clip.samples.iter().all(|v| (-1.0..=1.0).contains(v)));
        outputs.push(std::fs::read(out.join("long.wav")).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn enhance_directory_keeps_names() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = toy_checkpoint(dir.path());
    let (noisy, _) = fixture(dir.path());
    let out = dir.path().join("enhanced");
    let res = manner(&["enhance", "--checkpoint", ckpt.to_str().unwrap(), "--out", out.to_str().unwrap(), noisy.to_str().unwrap()]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let mut names: Vec<String> = std::fs::read_dir(&out).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    assert_eq!(names, ["a.wav", "b.wav", "c.wav"]);
}

#[test]
fn enhance_failures_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = toy_checkpoint(dir.path());
    let low = dir.path().join("low.wav");
    write_wav(&low, &tone(8000, 150.0, 8000, 0.0)).unwrap();
    let out = dir.path().join("o");
    let res = manner(&["enhance", "--checkpoint", ckpt.to_str().unwrap(), "--out", out.to_str().unwrap(), low.to_str().unwrap()]);
    assert_eq!(code(&res), 3);
    assert!(String::from_utf8_lossy(&res.stderr).contains("sample rate"));

    let bad = dir.path().join("bad.ckpt");
    std::fs::write(&bad, b"garbage").unwrap();
    let res = manner(&["enhance", "--checkpoint", bad.to_str().unwrap(), "--out", out.to_str().unwrap(), low.to_str().unwrap()]);
    assert_eq!(code(&res), 4);
}

#[test]
fn eval_reports_every_utterance_and_the_mean() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = toy_checkpoint(dir.path());
    let (noisy, clean) = fixture(dir.path());
    let csv = dir.path().join("eval.csv");
    let res = manner(&[
        "eval", "--checkpoint", ckpt.to_str().unwrap(), "--out", csv.to_str().unwrap(), noisy.to_str().unwrap(), clean.to_str().unwrap(),
    ]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let table = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(table, String::from_utf8_lossy(&res.stdout));
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "id,si_snr_noisy_db,si_snr_enhanced_db,improvement_db");
    assert_eq!(lines.len(), 5);
    assert!(lines[4].starts_with("mean,"));
    for l in &lines[1..] {
        let f: Vec<f64> = l.split(',').skip(1).map(|v| v.parse().unwrap()).collect();
        assert!((f[2] - (f[1] - f[0])).abs() < 2e-3, "{l}");
    }
}

#[test]
fn bench_default_lengths_give_ten_rows() {
    let dir = tempfile::tempdir().unwrap();
    let (noisy, clean) = fixture(dir.path());
    let cfg = toy_config(dir.path(), &noisy, &clean);
    let res = manner(&["bench", "--config", cfg.to_str().unwrap(), "--variant", "small"]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let csv = String::from_utf8_lossy(&res.stdout);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "length_s,median_ms,peak_bytes");
    assert_eq!(lines.len(), 11);
    let lengths: Vec<f64> = lines[1..].iter().map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(lengths, (1..=10).map(f64::from).collect::<Vec<_>>());
}

#[test]
fn bench_compares_both_variants_into_files() {
    let dir = tempfile::tempdir().unwrap();
    let (noisy, clean) = fixture(dir.path());
    let cfg = toy_config(dir.path(), &noisy, &clean);
    let out = dir.path().join("bench");
    let res = manner(&["bench", "--config", cfg.to_str().unwrap(), "--lengths", "0.5,1", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    for v in ["full", "small"] {
        let csv = std::fs::read_to_string(out.join(format!("bench_{v}.csv"))).unwrap();
        assert_eq!(csv.lines().count(), 3);
    }
    let table = String::from_utf8_lossy(&res.stderr);
    assert!(table.contains("full_ms") && table.contains("small_ms"));
    let res = manner(&["bench", "--config", cfg.to_str().unwrap(), "--lengths", "1,0.5"]);
    assert_eq!(code(&res), 2);
    let res = manner(&["bench", "--config", cfg.to_str().unwrap(), "--runs", "3"]);
    assert_eq!(code(&res), 2);
}
