//! Adam and the one-cycle learning-rate schedule.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParameterTree;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |b: f64| (0.0..1.0).contains(&b);
        if !unit(self.beta1) || !unit(self.beta2) || self.eps.is_nan() || self.eps <= 0.0 {
            return Err(Error::Config(format!("invalid Adam hyperparameters {self:?}")));
        }
        Ok(())
    }
}

/// Moments for every trainable entry of a tree, in
/// [`ParameterTree::param_ids`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, tree: &ParameterTree<f32>) -> Self {
        let zeros: Vec<Tensor<f32>> = tree.param_ids().iter().map(|&i| Tensor::zeros(tree.get(i).shape())).collect();
        AdamState { config, step: 0, m: zeros.clone(), v: zeros }
    }

    /// One bias-corrected update. `grads` is index-aligned with the tree
    /// entries (buffers included, their gradients ignored).
    pub fn step(&mut self, tree: &mut ParameterTree<f32>, grads: &[Tensor<f32>], lr: f64) -> Result<()> {
        let ids = tree.param_ids();
        if grads.len() != tree.len() || ids.len() != self.m.len() {
            return Err(Error::shape(
                "adam_step",
                format!("{} gradients and {} moments for {} entries", grads.len(), self.m.len(), tree.len()),
            ));
        }
        for (k, &id) in ids.iter().enumerate() {
            let p = tree.get(id);
            if grads[id].shape() != p.shape() || self.m[k].shape() != p.shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!("`{}`: param {:?}, grad {:?}", tree.name(id), p.shape(), grads[id].shape()),
                ));
            }
        }
        self.step += 1;
        let AdamConfig { beta1: b1, beta2: b2, eps } = self.config;
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (k, &id) in ids.iter().enumerate() {
            let n = grads[id].numel();
            let (mut p, mut m, mut v) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
            let it = tree.get(id).data().iter().zip(grads[id].data()).zip(self.m[k].data()).zip(self.v[k].data());
            for (((&p0, &g), &m0), &v0) in it {
                let g = g as f64;
                let m1 = b1 * m0 as f64 + (1.0 - b1) * g;
                let v1 = b2 * v0 as f64 + (1.0 - b2) * g * g;
                let update = lr * (m1 / c1) / ((v1 / c2).sqrt() + eps);
                p.push((p0 as f64 - update) as f32);
                m.push(m1 as f32);
                v.push(v1 as f32);
            }
            let shape = grads[id].shape().to_vec();
            tree.set(id, Tensor::new(&shape, p)?)?;
            self.m[k] = Tensor::new(&shape, m)?;
            self.v[k] = Tensor::new(&shape, v)?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub lr_min: f64,
    pub lr_max: f64,
    /// Fraction of the cycle spent ramping up.
    pub warmup: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig { lr_min: 1e-5, lr_max: 1e-2, warmup: 0.3 }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_min > 0.0 && self.lr_min < self.lr_max && self.lr_max.is_finite()) {
            return Err(Error::Config(format!(
                "need 0 < lr_min < lr_max, got {} and {}",
                self.lr_min, self.lr_max
            )));
        }
        if !(self.warmup > 0.0 && self.warmup < 1.0) {
            return Err(Error::Config(format!("warmup fraction must be in (0, 1), got {}", self.warmup)));
        }
        Ok(())
    }

    /// Step at which the schedule peaks.
    pub fn peak_step(&self, total_steps: usize) -> usize {
        let peak = (self.warmup * total_steps as f64).round() as usize;
        peak.clamp(1, total_steps.saturating_sub(1).max(1))
    }
}

/// Cosine ramp from `lr_min` to `lr_max` over the warmup, then cosine
/// annealing back to `lr_min` at `total_steps`.
pub fn onecycle_lr(step: usize, total_steps: usize, cfg: &ScheduleConfig) -> Result<f64> {
    if total_steps == 0 || step > total_steps {
        return Err(Error::InvalidArgument(format!("step {step} outside schedule of {total_steps} steps")));
    }
    let peak = cfg.peak_step(total_steps);
    let blend = |from: f64, to: f64, frac: f64| match frac {
        f if f <= 0.0 => from,
        f if f >= 1.0 => to,
        f => to + (from - to) * 0.5 * (1.0 + (PI * f).cos()),
    };
    Ok(if step <= peak {
        blend(cfg.lr_min, cfg.lr_max, step as f64 / peak as f64)
    } else {
        blend(cfg.lr_max, cfg.lr_min, (step - peak) as f64 / (total_steps - peak) as f64)
    })
}
