//! Scale-invariant signal-to-noise ratio.

use crate::error::{Error, Result};

/// Reported values are clamped to `±SI_SNR_CAP` dB.
pub const SI_SNR_CAP: f64 = 60.0;

/// SI-SNR of `estimate` against `reference` in dB, both zero-meaned first.
/// A perfect (or perfectly scaled) estimate reports the cap; a silent
/// reference or estimate reports minus the cap.
pub fn si_snr(estimate: &[f32], reference: &[f32]) -> Result<f64> {
    if estimate.len() != reference.len() || estimate.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "si_snr needs equal non-empty lengths, got {} and {}",
            estimate.len(),
            reference.len()
        )));
    }
    let mean = |x: &[f32]| x.iter().map(|&v| v as f64).sum::<f64>() / x.len() as f64;
    let (me, mr) = (mean(estimate), mean(reference));
    let (mut dot, mut rr) = (0.0, 0.0);
    for (&e, &r) in estimate.iter().zip(reference) {
        let (e, r) = (e as f64 - me, r as f64 - mr);
        dot += e * r;
        rr += r * r;
    }
    if rr == 0.0 {
        return Ok(-SI_SNR_CAP);
    }
    let k = dot / rr;
    let (mut target, mut noise) = (0.0, 0.0);
    for (&e, &r) in estimate.iter().zip(reference) {
        let s = k * (r as f64 - mr);
        target += s * s;
        let d = e as f64 - me - s;
        noise += d * d;
    }
    if target == 0.0 {
        return Ok(-SI_SNR_CAP);
    }
    // residual at rounding level counts as a perfect estimate
    if noise <= target * 1e-12 {
        return Ok(SI_SNR_CAP);
    }
    Ok((10.0 * (target / noise).log10()).clamp(-SI_SNR_CAP, SI_SNR_CAP))
}
