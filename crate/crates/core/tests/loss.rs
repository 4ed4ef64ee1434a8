mod common;

use std::f64::consts::PI;

use common::randn;
use manner::gradcheck::{check_f32_against_f64, check_f64, Differentiable};
use manner::loss::{
    alpha, combined_loss, multires_stft_loss, stft_loss, stft_magnitude, weighted_total_loss, LossConfig, StftConfig,
    DEFAULT_RESOLUTIONS, LOG_EPS,
};
use manner::{Element, Tape, Tensor, Var};
use proptest::prelude::*;

fn c(x: &Tensor<f32>) -> Var<f32> {
    Var::constant(x.clone())
}

/// Windowed DFT evaluated term by term.
fn naive_stft(x: &[f64], cfg: &StftConfig) -> Vec<Vec<f64>> {
    let w: Vec<f64> = (0..cfg.window_length)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / cfg.window_length as f64).cos())
        .collect();
    let frames = (x.len() - cfg.window_length) / cfg.hop + 1;
    (0..frames)
        .map(|f| {
            (0..=cfg.fft_size / 2)
                .map(|k| {
                    let (mut re, mut im) = (0.0, 0.0);
                    for n in 0..cfg.window_length {
                        let v = x[f * cfg.hop + n] * w[n];
                        let ph = -2.0 * PI * (k * n) as f64 / cfg.fft_size as f64;
                        re += v * ph.cos();
                        im += v * ph.sin();
                    }
                    (re * re + im * im).sqrt()
                })
                .collect()
        })
        .collect()
}

/// Second implementation of loss(y, ŷ): time L1 plus mean over resolutions
/// of spectral convergence and log-magnitude L1, all in f64 via naive DFT.
fn reference_loss(y: &[f64], h: &[f64], cfgs: &[StftConfig]) -> (f64, f64) {
    let l1 = y.iter().zip(h).map(|(a, b)| (a - b).abs()).sum::<f64>() / y.len() as f64;
    let mut stft = 0.0;
    for cfg in cfgs {
        let (my, mh) = (naive_stft(y, cfg), naive_stft(h, cfg));
        let (mut num, mut den, mut mag, mut count) = (0.0, 0.0, 0.0, 0.0);
        for (ry, rh) in my.iter().zip(&mh) {
            for (&a, &b) in ry.iter().zip(rh) {
                num += (a - b) * (a - b);
                den += a * a;
                mag += (a.max(LOG_EPS).ln() - b.max(LOG_EPS).ln()).abs();
                count += 1.0;
            }
        }
        stft += num.sqrt() / den.sqrt() + mag / count;
    }
    (l1, stft / cfgs.len() as f64)
}

#[test]
fn stft_matches_naive_dft() {
    let x = randn(&[256], 1);
    for cfg in [StftConfig::new(64, 16, 64), StftConfig::new(64, 20, 48)] {
        let tape = Tape::new();
        let m = stft_magnitude(&tape, &c(&x), &cfg).unwrap().into_value();
        let xs: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
        let want = naive_stft(&xs, &cfg);
        assert_eq!(m.shape(), &[want.len(), 33]);
        let worst = want
            .iter()
            .flatten()
            .zip(m.data())
            .fold(0.0f64, |w, (a, &b)| w.max((a - b as f64).abs()));
        assert!(worst < 1e-4, "{cfg:?}: {worst}");
    }
}

#[test]
fn stft_of_bin_centered_tone_peaks_at_that_bin() {
    let cfg = StftConfig::new(64, 16, 64);
    let x = Tensor::<f32>::from_fn(&[512], |n| (2.0 * PI * 5.0 * n as f64 / 64.0).cos() as f32);
    let tape = Tape::new();
    let m = stft_magnitude(&tape, &c(&x), &cfg).unwrap().into_value();
    for row in m.data().chunks(33) {
        let argmax = row.iter().enumerate().fold(0, |b, (i, &v)| if v > row[b] { i } else { b });
        assert_eq!(argmax, 5);
        // Hann leakage reaches only the neighbouring bins
        assert!(row.iter().enumerate().filter(|(i, _)| i.abs_diff(5) > 1).all(|(_, &v)| v < 1e-3 * row[5]));
    }
}

#[test]
fn stft_of_silence_and_short_signals() {
    let cfg = StftConfig::new(64, 16, 64);
    let tape = Tape::new();
    let m = stft_magnitude(&tape, &c(&Tensor::zeros(&[100])), &cfg).unwrap();
    assert!(m.value().data().iter().all(|&v| v == 0.0));
    assert!(stft_magnitude(&tape, &c(&Tensor::zeros(&[63])), &cfg).is_err());
    assert!(stft_magnitude(&tape, &c(&Tensor::zeros(&[100])), &StftConfig::new(32, 16, 64)).is_err());
}

#[test]
fn spectral_convergence_identities() {
    let y = randn(&[2000], 2);
    for cfg in DEFAULT_RESOLUTIONS {
        let tape = Tape::new();
        let (sc, mag) = stft_loss(&tape, &c(&y), &c(&y), &cfg, LOG_EPS).unwrap();
        assert_eq!(sc.value().item().unwrap(), 0.0);
        assert_eq!(mag.value().item().unwrap(), 0.0);
        let (sc, _) = stft_loss(&tape, &c(&y), &c(&Tensor::zeros(&[2000])), &cfg, LOG_EPS).unwrap();
        assert_eq!(sc.value().item().unwrap(), 1.0);
    }
    let tape = Tape::new();
    assert!(stft_loss(&tape, &c(&y), &c(&Tensor::zeros(&[1999])), &DEFAULT_RESOLUTIONS[0], LOG_EPS).is_err());
}

#[test]
fn multires_reduces_and_vanishes() {
    let y = randn(&[3000], 3);
    let h = randn(&[3000], 4);
    let tape = Tape::new();
    let cfg = DEFAULT_RESOLUTIONS[1];
    let one = multires_stft_loss(&tape, &c(&y), &c(&h), &[cfg], LOG_EPS).unwrap().total.value().item().unwrap();
    let (sc, mag) = stft_loss(&tape, &c(&y), &c(&h), &cfg, LOG_EPS).unwrap();
    assert_eq!(one, sc.value().item().unwrap() + mag.value().item().unwrap());
    let same = multires_stft_loss(&tape, &c(&y), &c(&y), &DEFAULT_RESOLUTIONS, LOG_EPS).unwrap();
    assert_eq!(same.total.value().item().unwrap(), 0.0);
    assert!(multires_stft_loss(&tape, &c(&y), &c(&h), &[], LOG_EPS).is_err());
}

#[test]
fn multires_matches_independent_reference() {
    let y = randn(&[3000], 5);
    let h = y.zip_map(&randn(&[3000], 6), "mix", |a, b| 0.8 * a + 0.3 * b).unwrap();
    let tape = Tape::new();
    let got = combined_loss(&tape, &c(&y), &c(&h), &DEFAULT_RESOLUTIONS, LOG_EPS).unwrap();
    let to64 = |t: &Tensor<f32>| t.data().iter().map(|&v| v as f64).collect::<Vec<_>>();
    let (l1, stft) = reference_loss(&to64(&y), &to64(&h), &DEFAULT_RESOLUTIONS);
    assert!((got.l1 - l1).abs() < 1e-6);
    let total = got.total.value().item().unwrap() as f64;
    assert!((total - (l1 + stft)).abs() < 1e-4 * (l1 + stft), "{total} vs {}", l1 + stft);
}

#[test]
fn short_signals_skip_long_resolutions() {
    let y = randn(&[512], 7);
    let h = randn(&[512], 8);
    let tape = Tape::new();
    let m = multires_stft_loss(&tape, &c(&y), &c(&h), &DEFAULT_RESOLUTIONS, LOG_EPS).unwrap();
    assert!(m.per_resolution[0].is_some());
    assert!(m.per_resolution[1].is_none() && m.per_resolution[2].is_none());
    let (sc, mag) = stft_loss(&tape, &c(&y), &c(&h), &DEFAULT_RESOLUTIONS[0], LOG_EPS).unwrap();
    let want = sc.value().item().unwrap() + mag.value().item().unwrap();
    assert_eq!(m.total.value().item().unwrap(), want);
}

#[test]
fn l1_term_is_offset_and_homogeneous() {
    let y = randn(&[1500], 9);
    let tape = Tape::new();
    let shifted = y.map(|v| v + 0.125);
    let got = combined_loss(&tape, &c(&y), &c(&shifted), &DEFAULT_RESOLUTIONS, LOG_EPS).unwrap();
    assert!((got.l1 - 0.125).abs() < 1e-7);
    let e = randn(&[1500], 10);
    let l1_at = |k: f32| {
        let h = y.zip_map(&e, "err", |a, b| a + k * b).unwrap();
        combined_loss(&tape, &c(&y), &c(&h), &DEFAULT_RESOLUTIONS, LOG_EPS).unwrap().l1
    };
    assert!((l1_at(3.0) - 3.0 * l1_at(1.0)).abs() < 1e-5);
}

#[test]
fn alpha_arithmetic() {
    assert_eq!(alpha(3.0, 1.0), 0.75);
    assert_eq!(alpha(2.0, 0.0), 1.0);
    assert_eq!(alpha(0.0, 0.0), 0.5);
}

fn batch(rows: &[Tensor<f32>]) -> Tensor<f32> {
    let t = rows[0].numel();
    Tensor::from_fn(&[rows.len(), 1, t], |i| rows[i / t].data()[i % t])
}

#[test]
fn weighted_total_identities() {
    let cfg = LossConfig::default();
    let y = randn(&[2000], 11);
    let n = randn(&[2000], 12);
    let x = y.zip_map(&n, "mix", |a, b| a + b).unwrap();
    let tape = Tape::new();

    // perfect estimate
    let (total, report) = weighted_total_loss(&tape, &c(&batch(std::slice::from_ref(&x))), &c(&batch(std::slice::from_ref(&y))), &c(&batch(std::slice::from_ref(&y))), &cfg).unwrap();
    assert!(total.value().item().unwrap().abs() < 1e-6);
    assert!(report.total.abs() < 1e-6);

    // clean input: alpha = 1, total = loss(y, ŷ)
    let h = randn(&[2000], 13);
    let (_, report) = weighted_total_loss(&tape, &c(&batch(std::slice::from_ref(&y))), &c(&batch(std::slice::from_ref(&y))), &c(&batch(std::slice::from_ref(&h))), &cfg).unwrap();
    assert_eq!(report.alpha, 1.0);
    let clean = combined_loss(&tape, &c(&y), &c(&h), &cfg.resolutions, LOG_EPS).unwrap().total.value().item().unwrap() as f64;
    assert!((report.total - clean).abs() < 1e-6 * clean);

    // energy 3:1
    let y3 = Tensor::<f32>::from_fn(&[2000], |i| if i < 3 { 1.0 } else { 0.0 });
    let n1 = Tensor::<f32>::from_fn(&[2000], |i| if i == 1000 { 1.0 } else { 0.0 });
    let x3 = y3.zip_map(&n1, "mix", |a, b| a + b).unwrap();
    let (_, report) = weighted_total_loss(&tape, &c(&batch(&[x3])), &c(&batch(&[y3])), &c(&batch(&[h])), &cfg).unwrap();
    assert_eq!(report.alpha, 0.75);
    assert!(report.resolutions.iter().all(Option::is_some));
    assert!(report.log_fields().contains("alpha=0.750000"));
}

#[test]
fn alpha_is_per_example_then_averaged() {
    let cfg = LossConfig::default();
    let y = randn(&[1500], 14);
    let n = randn(&[1500], 15).map(|v| v * 0.5);
    let x = y.zip_map(&n, "mix", |a, b| a + b).unwrap();
    let h = randn(&[1500], 16);
    let tape = Tape::new();
    let single = |xx: &Tensor<f32>, yy: &Tensor<f32>, hh: &Tensor<f32>| {
        weighted_total_loss(&tape, &c(&batch(std::slice::from_ref(xx))), &c(&batch(std::slice::from_ref(yy))), &c(&batch(std::slice::from_ref(hh))), &cfg)
            .unwrap()
            .1
    };
    let a = single(&x, &y, &h);
    let b = single(&y, &y, &h);
    let (_, both) = weighted_total_loss(
        &tape,
        &c(&batch(&[x.clone(), y.clone()])),
        &c(&batch(&[y.clone(), y.clone()])),
        &c(&batch(&[h.clone(), h.clone()])),
        &cfg,
    )
    .unwrap();
    assert!((both.alpha - (a.alpha + b.alpha) / 2.0).abs() < 1e-12);
    assert!((both.total - (a.total + b.total) / 2.0).abs() < 1e-5);
}

#[test]
fn unweighted_loss_uses_clean_term_only() {
    let cfg = LossConfig { weighted: false, ..LossConfig::default() };
    let y = randn(&[1500], 17);
    let x = y.zip_map(&randn(&[1500], 18), "mix", |a, b| a + b).unwrap();
    let h = randn(&[1500], 19);
    let tape = Tape::new();
    let (_, r) = weighted_total_loss(&tape, &c(&batch(&[x])), &c(&batch(&[y])), &c(&batch(&[h])), &cfg).unwrap();
    assert_eq!(r.noise, 0.0);
    assert!((r.total - r.clean).abs() < 1e-6 * r.clean);
}

struct StftLossFn {
    y: Tensor<f32>,
    cfg: StftConfig,
}

impl Differentiable for StftLossFn {
    fn eval<E: Element>(&self, tape: &Tape<E>, v: &[Var<E>]) -> manner::Result<Var<E>> {
        let (sc, mag) = stft_loss(tape, &Var::constant(self.y.cast()), &v[0], &self.cfg, LOG_EPS)?;
        tape.add(&sc, &mag)
    }
}

struct TotalLossFn {
    x: Tensor<f32>,
    y: Tensor<f32>,
    cfg: LossConfig,
}

impl Differentiable for TotalLossFn {
    fn eval<E: Element>(&self, tape: &Tape<E>, v: &[Var<E>]) -> manner::Result<Var<E>> {
        let (x, y) = (Var::constant(self.x.cast()), Var::constant(self.y.cast()));
        Ok(weighted_total_loss(tape, &x, &y, &v[0], &self.cfg)?.0)
    }
}

#[test]
fn stft_loss_gradients_at_512() {
    let f = StftLossFn { y: randn(&[512], 20), cfg: DEFAULT_RESOLUTIONS[0] };
    let h = randn(&[512], 21);
    let r32 = check_f32_against_f64(&f, std::slice::from_ref(&h)).unwrap();
    assert!(r32.max_rel_error < 1e-3, "{r32:?}");
    let r64 = check_f64(&f, &[h]).unwrap();
    assert!(r64.max_rel_error < 1e-6, "{r64:?}");
}

#[test]
fn weighted_total_loss_gradients() {
    let y = batch(&[randn(&[300], 22), randn(&[300], 23)]);
    let x = y.zip_map(&randn(&[2, 1, 300], 24), "mix", |a, b| a + 0.5 * b).unwrap();
    let cfg = LossConfig { resolutions: vec![StftConfig::new(64, 16, 48), StftConfig::new(128, 32, 96)], weighted: true, log_eps: LOG_EPS };
    let f = TotalLossFn { x, y, cfg };
    let h = randn(&[2, 1, 300], 25);
    let r32 = check_f32_against_f64(&f, std::slice::from_ref(&h)).unwrap();
    assert!(r32.max_rel_error < 1e-3, "{r32:?}");
    let r64 = check_f64(&f, &[h]).unwrap();
    assert!(r64.max_rel_error < 1e-6, "{r64:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn losses_are_nonnegative_and_alpha_in_range(len in 1200usize..1600, s1 in 0u64..500, s2 in 0u64..500, k in 0.0f32..2.0) {
        let y = randn(&[len], s1);
        let n = randn(&[len], s2 + 1000).map(|v| v * k);
        let x = y.zip_map(&n, "mix", |a, b| a + b).unwrap();
        let h = randn(&[len], s2);
        let tape = Tape::new();
        let (_, r) = weighted_total_loss(&tape, &c(&batch(&[x])), &c(&batch(&[y])), &c(&batch(&[h])), &LossConfig::default()).unwrap();
        prop_assert!(r.total >= 0.0 && r.clean >= 0.0 && r.noise >= 0.0 && r.l1 >= 0.0);
        prop_assert!((0.0..=1.0).contains(&r.alpha));
    }
}
