//! Central-difference verification of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Half-width of the central difference.
    pub eps: f64,
    /// Check at most this many coordinates per input (sampled without
    /// replacement); `None` checks all of them.
    pub max_coords_per_input: Option<usize>,
    pub seed: u64,
}

impl GradCheckOptions {
    pub fn with_eps(eps: f64) -> Self {
        GradCheckOptions {
            eps,
            max_coords_per_input: None,
            seed: 0,
        }
    }

    /// Step sizes that keep truncation and rounding error balanced for `E`.
    pub fn for_element<E: Element>() -> Self {
        Self::with_eps(if E::NAME == "f32" { 1e-2 } else { 1e-6 })
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `max |analytic - numeric|` over checked coordinates, divided by the
    /// largest numeric gradient magnitude seen.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub gradient_scale: f64,
    pub coords_checked: usize,
    /// Input index and flat coordinate of the worst disagreement.
    pub worst: Option<(usize, usize)>,
}

/// Compares `backward()` of the scalar `f(inputs)` against central
/// differences `(f(x + eps) - f(x - eps)) / (2 eps)` per coordinate.
pub fn finite_diff_check<E, F>(f: F, inputs: &[Tensor<E>], eps: f64) -> Result<GradCheckReport>
where
    E: Element,
    F: Fn(&Tape<E>, &[Var<E>]) -> Result<Var<E>>,
{
    finite_diff_check_with(f, inputs, &GradCheckOptions::with_eps(eps))
}

pub fn finite_diff_check_with<E, F>(f: F, inputs: &[Tensor<E>], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    E: Element,
    F: Fn(&Tape<E>, &[Var<E>]) -> Result<Var<E>>,
{
    let analytic = analytic_gradients(&f, inputs)?;
    let analytic: Vec<Tensor<f64>> = analytic.iter().map(|t| t.cast()).collect();
    compare(&f, &analytic, inputs, opts)
}

/// A scalar function that can be evaluated at either precision.
pub trait Differentiable {
    fn eval<E: Element>(&self, tape: &Tape<E>, inputs: &[Var<E>]) -> Result<Var<E>>;
}

/// Checks 32-bit reverse-mode gradients against central differences of the
/// same function evaluated in 64-bit, with the 64-bit step size.
pub fn check_f32_against_f64<F: Differentiable>(f: &F, inputs: &[Tensor<f32>]) -> Result<GradCheckReport> {
    check_f32_against_f64_with(f, inputs, &GradCheckOptions::for_element::<f64>())
}

pub fn check_f32_against_f64_with<F: Differentiable>(
    f: &F,
    inputs: &[Tensor<f32>],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let analytic = analytic_gradients(&|t: &Tape<f32>, v: &[Var<f32>]| f.eval(t, v), inputs)?;
    let analytic: Vec<Tensor<f64>> = analytic.iter().map(|t| t.cast()).collect();
    let wide: Vec<Tensor<f64>> = inputs.iter().map(|t| t.cast()).collect();
    compare(&|t: &Tape<f64>, v: &[Var<f64>]| f.eval(t, v), &analytic, &wide, opts)
}

/// Pure 64-bit check of a [`Differentiable`].
pub fn check_f64<F: Differentiable>(f: &F, inputs: &[Tensor<f32>]) -> Result<GradCheckReport> {
    check_f64_with(f, inputs, &GradCheckOptions::for_element::<f64>())
}

pub fn check_f64_with<F: Differentiable>(f: &F, inputs: &[Tensor<f32>], opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let wide: Vec<Tensor<f64>> = inputs.iter().map(|t| t.cast()).collect();
    finite_diff_check_with(|t: &Tape<f64>, v: &[Var<f64>]| f.eval(t, v), &wide, opts)
}

fn compare<E, F>(f: &F, analytic: &[Tensor<f64>], inputs: &[Tensor<E>], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    E: Element,
    F: Fn(&Tape<E>, &[Var<E>]) -> Result<Var<E>>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let eval = |values: &[Tensor<E>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<E>> = values.iter().cloned().map(Var::constant).collect();
        let out = f(&tape, &vars)?;
        Ok(out.value().item()?.as_f64())
    };

    let mut pairs: Vec<(usize, usize, f64, f64)> = Vec::new();
    let mut current: Vec<Tensor<E>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let coords: Vec<usize> = match opts.max_coords_per_input {
            Some(k) if k < n => {
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        let base = input.to_vec();
        for j in coords {
            let mut shifted = base.clone();
            shifted[j] = base[j] + E::lit(opts.eps);
            current[i] = Tensor::new(input.shape(), shifted.clone())?;
            let plus = eval(&current)?;
            shifted[j] = base[j] - E::lit(opts.eps);
            current[i] = Tensor::new(input.shape(), shifted)?;
            let minus = eval(&current)?;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            pairs.push((i, j, analytic[i].data()[j], numeric));
        }
        current[i] = input.clone();
    }

    let scale = pairs.iter().fold(0.0f64, |m, p| m.max(p.3.abs()));
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        gradient_scale: scale,
        coords_checked: pairs.len(),
        worst: None,
    };
    for &(i, j, a, n) in &pairs {
        let err = (a - n).abs();
        if !err.is_finite() {
            return Err(Error::InvalidArgument(format!("non-finite gradient at input {i}, coordinate {j}")));
        }
        if err > report.max_abs_error || report.worst.is_none() {
            report.max_abs_error = report.max_abs_error.max(err);
            report.worst = Some((i, j));
        }
    }
    report.max_rel_error = if scale > 0.0 {
        report.max_abs_error / scale
    } else {
        report.max_abs_error
    };
    Ok(report)
}

/// Reverse-mode gradients of the scalar `f(inputs)` with respect to each input.
pub fn analytic_gradients<E, F>(f: &F, inputs: &[Tensor<E>]) -> Result<Vec<Tensor<E>>>
where
    E: Element,
    F: Fn(&Tape<E>, &[Var<E>]) -> Result<Var<E>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<E>> = inputs.iter().cloned().map(|t| tape.leaf(t)).collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(&loss)?;
    Ok(vars.iter().map(|v| grads.wrt(v)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_for_linear_functions() {
        let x = Tensor::<f64>::from_slice(&[4], &[1.0, -2.0, 3.0, 0.5]).unwrap();
        let w = Tensor::<f64>::from_slice(&[4], &[0.3, 0.1, -0.7, 2.0]).unwrap();
        let report = finite_diff_check(
            |tape, v| {
                let p = tape.mul(&v[0], &v[1])?;
                Ok(tape.sum(&p))
            },
            &[x, w],
            1e-3,
        )
        .unwrap();
        // bilinear: central differences are exact up to rounding
        assert!(report.max_rel_error < 1e-10, "{report:?}");
    }

    #[test]
    fn corrupted_gradient_is_flagged() {
        // A custom op whose backward is deliberately doubled.
        let x = Tensor::<f64>::from_slice(&[3], &[0.2, -1.0, 4.0]).unwrap();
        let report = finite_diff_check(
            |tape, v| {
                let doubled = tape.record(
                    v[0].value().clone(),
                    &[&v[0]],
                    Box::new(|g, _| Ok(vec![Some(g.map(|d| 2.0 * d))])),
                );
                Ok(tape.sum(&doubled))
            },
            &[x],
            1e-6,
        )
        .unwrap();
        assert!((report.max_rel_error - 1.0).abs() < 1e-6, "{report:?}");
    }
}
