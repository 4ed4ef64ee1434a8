//! Inference timing and peak tensor memory against signal length.

use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::audio::SAMPLE_RATE;
use crate::error::{Error, Result};
use crate::model::Manner;
use crate::nn::ParameterTree;
use crate::tensor::{memory, Tensor};

pub const MIN_RUNS: usize = 5;

pub const CSV_HEADER: &str = "length_s,median_ms,peak_bytes";

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub length_s: f64,
    pub median_ms: f64,
    /// Highest tensor-storage high-water mark over the runs.
    pub peak_bytes: usize,
    pub runs_ms: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub label: String,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{CSV_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{:.3},{}", r.length_s, r.median_ms, r.peak_bytes);
        }
        s
    }
}

/// Lengths 1, 2, ..., 10 seconds.
pub fn default_lengths() -> Vec<f64> {
    (1..=10).map(|s| s as f64).collect()
}

/// Reduces glibc's page-fault and trim churn on the large, short-lived
/// activation buffers so timings reflect compute.
pub fn tune_allocator() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    // SAFETY: mallopt only adjusts allocator thresholds.
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
        libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
    }
}

/// Times `runs` eval-mode forward passes per length on a single thread,
/// after one warm-up pass. Lengths must be strictly increasing.
pub fn run_bench(label: &str, model: &Manner, params: &ParameterTree<f32>, lengths_s: &[f64], runs: usize) -> Result<BenchReport> {
    if runs < MIN_RUNS {
        return Err(Error::InvalidArgument(format!("need at least {MIN_RUNS} runs per length, got {runs}")));
    }
    if lengths_s.is_empty() || lengths_s.iter().any(|&l| !(l > 0.0)) || lengths_s.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument(format!("lengths must be positive and strictly increasing: {lengths_s:?}")));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let rows = pool.install(|| {
        lengths_s
            .iter()
            .map(|&length_s| {
                let n = (length_s * SAMPLE_RATE as f64).round() as usize;
                let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
                let x = Tensor::<f32>::randn(&[1, 1, n], &mut rng).map(|v| 0.1 * v);
                model.enhance(params, &x)?;
                let mut runs_ms = Vec::with_capacity(runs);
                let mut peak_bytes = 0;
                for _ in 0..runs {
                    memory::reset_peak();
                    let base = memory::live_bytes();
                    let t0 = Instant::now();
                    let y = model.enhance(params, &x)?;
                    runs_ms.push(t0.elapsed().as_secs_f64() * 1e3);
                    peak_bytes = peak_bytes.max(memory::peak_bytes().saturating_sub(base));
                    drop(y);
                }
                Ok(BenchRow { length_s, median_ms: median(&runs_ms), peak_bytes, runs_ms })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(BenchReport { label: label.to_string(), rows })
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

/// Side-by-side table of reports sharing the same lengths.
pub fn comparison_table(reports: &[BenchReport]) -> String {
    let mut s = format!("{:>9}", "length_s");
    for r in reports {
        let _ = write!(s, " {:>14} {:>12}", format!("{}_ms", r.label), format!("{}_MiB", r.label));
    }
    s.push('\n');
    let rows = reports.first().map_or(0, |r| r.rows.len());
    for i in 0..rows {
        let _ = write!(s, "{:>9}", reports[0].rows[i].length_s);
        for r in reports {
            let row = &r.rows[i];
            let _ = write!(s, " {:>14.1} {:>12.1}", row.median_ms, row.peak_bytes as f64 / (1 << 20) as f64);
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
