//! Time-domain L1 plus multi-resolution STFT losses, and the clean/noise
//! weighted total.

use std::f64::consts::PI;
use std::fmt::Write as _;

use num_traits::Zero;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Default floor for magnitudes before the log.
pub const LOG_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StftConfig {
    pub fft_size: usize,
    pub hop: usize,
    pub window_length: usize,
}

impl StftConfig {
    pub const fn new(fft_size: usize, hop: usize, window_length: usize) -> Self {
        StftConfig { fft_size, hop, window_length }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_length == 0 || self.window_length > self.fft_size || self.hop == 0 || self.hop >= self.window_length {
            return Err(Error::Config(format!("invalid STFT resolution {self:?}")));
        }
        Ok(())
    }

    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Frames of a non-centered STFT over `t` samples, `None` if `t` is
    /// shorter than one window.
    pub fn frames(&self, t: usize) -> Option<usize> {
        (t >= self.window_length).then(|| (t - self.window_length) / self.hop + 1)
    }

    /// Periodic Hann window.
    pub fn window(&self) -> Vec<f64> {
        let n = self.window_length as f64;
        (0..self.window_length).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n).cos()).collect()
    }
}

pub const DEFAULT_RESOLUTIONS: [StftConfig; 3] = [
    StftConfig::new(512, 50, 240),
    StftConfig::new(1024, 120, 600),
    StftConfig::new(2048, 240, 1200),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub resolutions: Vec<StftConfig>,
    /// Weight clean and noise estimates by signal energy; otherwise only the
    /// clean term is used.
    pub weighted: bool,
    /// Floor applied to magnitudes before the log.
    pub log_eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { resolutions: DEFAULT_RESOLUTIONS.to_vec(), weighted: true, log_eps: LOG_EPS }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.resolutions.is_empty() {
            return Err(Error::Config("at least one STFT resolution is required".into()));
        }
        if !(self.log_eps.is_finite() && self.log_eps > 0.0) {
            return Err(Error::Config(format!("log_eps must be positive, got {}", self.log_eps)));
        }
        self.resolutions.iter().try_for_each(StftConfig::validate)
    }
}

fn expect_signal<E: Element>(op: &'static str, x: &Var<E>) -> Result<usize> {
    match x.shape() {
        [t] => Ok(*t),
        s => Err(Error::shape(op, format!("expected a 1-D signal, got {s:?}"))),
    }
}

fn same_length<E: Element>(op: &'static str, a: &Var<E>, b: &Var<E>) -> Result<usize> {
    let t = expect_signal(op, a)?;
    if expect_signal(op, b)? != t {
        return Err(Error::shape(op, format!("length mismatch {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(t)
}

/// `|STFT(x)|` of a 1-D signal, shape `[frames, fft_size/2 + 1]`.
pub fn stft_magnitude<E: Element>(tape: &Tape<E>, x: &Var<E>, cfg: &StftConfig) -> Result<Var<E>> {
    cfg.validate()?;
    let t = expect_signal("stft_magnitude", x)?;
    let frames = cfg
        .frames(t)
        .ok_or_else(|| Error::shape("stft_magnitude", format!("{t} samples shorter than window {}", cfg.window_length)))?;
    let (n, bins, hop) = (cfg.fft_size, cfg.bins(), cfg.hop);
    let window: Vec<E> = cfg.window().into_iter().map(E::lit).collect();
    let fft = FftPlanner::<E>::new().plan_fft_forward(n);
    let xd = x.value().data();

    let mut spectra = vec![Complex::<E>::zero(); frames * bins];
    let mut buf = vec![Complex::<E>::zero(); n];
    let mut scratch = vec![Complex::<E>::zero(); fft.get_inplace_scratch_len()];
    for f in 0..frames {
        buf.fill(Complex::zero());
        for (i, (b, &w)) in buf.iter_mut().zip(&window).enumerate() {
            b.re = xd[f * hop + i] * w;
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        spectra[f * bins..(f + 1) * bins].copy_from_slice(&buf[..bins]);
    }
    let mag: Vec<E> = spectra.iter().map(|c| c.norm()).collect();

    Ok(tape.record(
        Tensor::from_parts(vec![frames, bins], mag.clone()),
        &[x],
        Box::new(move |g, _| {
            // d|X_k|/du_n = Re(conj(X_k) e^{-2πikn/N}) / |X_k|, summed over
            // onesided bins: a forward FFT of c_k = g_k conj(X_k)/|X_k|.
            let mut dx = vec![E::zero(); t];
            let mut buf = vec![Complex::<E>::zero(); n];
            let mut scratch = vec![Complex::<E>::zero(); fft.get_inplace_scratch_len()];
            let gd = g.data();
            for f in 0..frames {
                buf.fill(Complex::zero());
                for k in 0..bins {
                    let m = mag[f * bins + k];
                    if m > E::zero() {
                        buf[k] = spectra[f * bins + k].conj() * (gd[f * bins + k] / m);
                    }
                }
                fft.process_with_scratch(&mut buf, &mut scratch);
                for (i, &w) in window.iter().enumerate() {
                    dx[f * hop + i] += w * buf[i].re;
                }
            }
            Ok(vec![Some(Tensor::from_parts(vec![t], dx))])
        }),
    ))
}

/// Spectral convergence and log-magnitude loss at one resolution. Magnitudes
/// are clamped to `log_eps` before the log.
pub fn stft_loss<E: Element>(
    tape: &Tape<E>,
    y: &Var<E>,
    y_hat: &Var<E>,
    cfg: &StftConfig,
    log_eps: f64,
) -> Result<(Var<E>, Var<E>)> {
    same_length("stft_loss", y, y_hat)?;
    let my = stft_magnitude(tape, y, cfg)?;
    let mh = stft_magnitude(tape, y_hat, cfg)?;
    let diff = tape.sub(&my, &mh)?;
    let num = tape.sqrt(&tape.sum(&tape.mul(&diff, &diff)?));
    let den = tape.sqrt(&tape.sum(&tape.mul(&my, &my)?));
    let sc = if den.value().item()? > E::zero() {
        tape.div(&num, &den)?
    } else {
        // silent reference: report 0 when both are silent, the absolute error otherwise
        num
    };
    let eps = E::lit(log_eps);
    let ly = tape.log(&tape.clamp_min(&my, eps));
    let lh = tape.log(&tape.clamp_min(&mh, eps));
    let mag = tape.mean(&tape.abs(&tape.sub(&ly, &lh)?));
    Ok((sc, mag))
}

/// Per-resolution terms of one signal pair; `None` for skipped resolutions.
pub struct MultiResTerms<E: Element> {
    pub total: Var<E>,
    pub per_resolution: Vec<Option<(f64, f64)>>,
}

/// Mean over resolutions of `sc + mag`. Resolutions whose window exceeds the
/// signal are skipped with a warning.
pub fn multires_stft_loss<E: Element>(
    tape: &Tape<E>,
    y: &Var<E>,
    y_hat: &Var<E>,
    configs: &[StftConfig],
    log_eps: f64,
) -> Result<MultiResTerms<E>> {
    if configs.is_empty() {
        return Err(Error::InvalidArgument("multi-resolution STFT loss needs at least one resolution".into()));
    }
    let t = same_length("multires_stft_loss", y, y_hat)?;
    let mut acc: Option<Var<E>> = None;
    let mut used = 0usize;
    let mut per = Vec::with_capacity(configs.len());
    for cfg in configs {
        if cfg.frames(t).is_none() {
            log::warn!("skipping STFT resolution {cfg:?}: signal has only {t} samples");
            per.push(None);
            continue;
        }
        let (sc, mag) = stft_loss(tape, y, y_hat, cfg, log_eps)?;
        per.push(Some((sc.value().item()?.as_f64(), mag.value().item()?.as_f64())));
        let term = tape.add(&sc, &mag)?;
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(&a, &term)?,
        });
        used += 1;
    }
    let total = match acc {
        Some(a) => tape.scale(&a, E::one() / E::lit(used as f64)),
        None => Var::constant(Tensor::scalar(E::zero())),
    };
    Ok(MultiResTerms { total, per_resolution: per })
}

/// Breakdown of `loss(y, ŷ)` for one pair.
pub struct CombinedTerms<E: Element> {
    pub total: Var<E>,
    pub l1: f64,
    pub per_resolution: Vec<Option<(f64, f64)>>,
}

/// `mean |y - ŷ|` plus the multi-resolution STFT loss.
pub fn combined_loss<E: Element>(
    tape: &Tape<E>,
    y: &Var<E>,
    y_hat: &Var<E>,
    configs: &[StftConfig],
    log_eps: f64,
) -> Result<CombinedTerms<E>> {
    same_length("combined_loss", y, y_hat)?;
    let l1 = tape.mean(&tape.abs(&tape.sub(y, y_hat)?));
    let stft = multires_stft_loss(tape, y, y_hat, configs, log_eps)?;
    Ok(CombinedTerms {
        l1: l1.value().item()?.as_f64(),
        total: tape.add(&l1, &stft.total)?,
        per_resolution: stft.per_resolution,
    })
}

/// `‖y‖² / (‖y‖² + ‖n‖²)`, 0.5 when both vanish.
pub fn alpha(clean_energy: f64, noise_energy: f64) -> f64 {
    let s = clean_energy + noise_energy;
    if s > 0.0 {
        clean_energy / s
    } else {
        0.5
    }
}

/// Scalars of one loss evaluation, batch means.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossReport {
    /// Time-domain term of `loss(y, ŷ)`.
    pub l1: f64,
    /// `(spectral convergence, magnitude)` of `loss(y, ŷ)` per resolution.
    pub resolutions: Vec<Option<(f64, f64)>>,
    pub alpha: f64,
    pub clean: f64,
    pub noise: f64,
    pub total: f64,
}

impl LossReport {
    /// `key=value` fields separated by spaces; skipped resolutions print `nan`.
    pub fn log_fields(&self) -> String {
        let mut s = format!("l1={:.6}", self.l1);
        for (r, terms) in self.resolutions.iter().enumerate() {
            let (sc, mag) = terms.unwrap_or((f64::NAN, f64::NAN));
            let _ = write!(s, " sc{r}={sc:.6} mag{r}={mag:.6}");
        }
        let _ = write!(
            s,
            " alpha={:.6} clean={:.6} noise={:.6} total={:.6}",
            self.alpha, self.clean, self.noise, self.total
        );
        s
    }
}

fn rows<E: Element>(tape: &Tape<E>, x: &Var<E>) -> Result<Vec<Var<E>>> {
    let (b, t) = match x.shape() {
        [b, 1, t] | [b, t] => (*b, *t),
        s => return Err(Error::shape("weighted_total_loss", format!("expected [B, 1, T] or [B, T], got {s:?}"))),
    };
    let flat = tape.reshape(x, &[b, t])?;
    (0..b)
        .map(|i| tape.reshape(&tape.narrow(&flat, 0, i, 1)?, &[t]))
        .collect()
}

/// `α·loss(y, ŷ) + (1−α)·loss(n, n̂)` with `n = x − y`, `n̂ = x − ŷ`, `α` per
/// example, averaged over the batch.
pub fn weighted_total_loss<E: Element>(
    tape: &Tape<E>,
    noisy: &Var<E>,
    clean: &Var<E>,
    estimate: &Var<E>,
    cfg: &LossConfig,
) -> Result<(Var<E>, LossReport)> {
    if noisy.shape() != clean.shape() || noisy.shape() != estimate.shape() {
        return Err(Error::shape(
            "weighted_total_loss",
            format!("{:?}, {:?}, {:?}", noisy.shape(), clean.shape(), estimate.shape()),
        ));
    }
    let (xs, ys, hs) = (rows(tape, noisy)?, rows(tape, clean)?, rows(tape, estimate)?);
    let batch = xs.len();
    let mut report = LossReport { resolutions: vec![None; cfg.resolutions.len()], ..LossReport::default() };
    let mut total: Option<Var<E>> = None;
    for ((x, y), h) in xs.iter().zip(&ys).zip(&hs) {
        let c = combined_loss(tape, y, h, &cfg.resolutions, cfg.log_eps)?;
        report.l1 += c.l1;
        report.clean += c.total.value().item()?.as_f64();
        for (slot, r) in report.resolutions.iter_mut().zip(&c.per_resolution) {
            if let Some((sc, mag)) = r {
                let (a, b) = slot.unwrap_or((0.0, 0.0));
                *slot = Some((a + sc, b + mag));
            }
        }
        let term = if cfg.weighted {
            let n = tape.sub(x, y)?;
            let n_hat = tape.sub(x, h)?;
            let energy = |v: &Var<E>| v.value().data().iter().map(|s| s.as_f64() * s.as_f64()).sum::<f64>();
            let a = alpha(energy(y), energy(&n));
            report.alpha += a;
            let cn = combined_loss(tape, &n, &n_hat, &cfg.resolutions, cfg.log_eps)?;
            report.noise += cn.total.value().item()?.as_f64();
            tape.add(&tape.scale(&c.total, E::lit(a)), &tape.scale(&cn.total, E::lit(1.0 - a)))?
        } else {
            report.alpha += 1.0;
            c.total
        };
        total = Some(match total {
            None => term,
            Some(acc) => tape.add(&acc, &term)?,
        });
    }
    let total = total.ok_or_else(|| Error::shape("weighted_total_loss", "empty batch"))?;
    let total = tape.scale(&total, E::one() / E::lit(batch as f64));
    let bf = batch as f64;
    report.l1 /= bf;
    report.alpha /= bf;
    report.clean /= bf;
    report.noise /= bf;
    for (sc, mag) in report.resolutions.iter_mut().flatten() {
        *sc /= bf;
        *mag /= bf;
    }
    report.total = total.value().item()?.as_f64();
    Ok((total, report))
}
