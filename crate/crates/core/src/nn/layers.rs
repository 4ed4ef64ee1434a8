use rand::Rng;

use super::{BnUpdate, Builder, Ctx, Kind, ParamId};
use crate::autograd::{BatchNormMode, BatchNormStats, Var};
use crate::error::{Error, Result};
use crate::tensor::Element;

/// 1-D convolution with bias, weight `[Cout, Cin/groups, K]`.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<E: Element, R: Rng>(
        b: &mut Builder<'_, E, R>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Self> {
        if groups == 0 || !cin.is_multiple_of(groups) || !cout.is_multiple_of(groups) {
            return Err(Error::Config(format!("{name}: {cin}->{cout} channels not divisible into {groups} groups")));
        }
        let weight = b.weight(&format!("{name}.weight"), &[cout, cin / groups, kernel], cin / groups * kernel)?;
        let bias = b.constant(&format!("{name}.bias"), &[cout], 0.0, Kind::Param)?;
        Ok(Conv { weight, bias, stride, padding, groups })
    }

    /// Kernel-1 convolution.
    pub fn pointwise<E: Element, R: Rng>(b: &mut Builder<'_, E, R>, name: &str, cin: usize, cout: usize) -> Result<Self> {
        Self::new(b, name, cin, cout, 1, 1, 0, 1)
    }

    /// Depthwise convolution with odd kernel and length-preserving padding.
    pub fn depthwise<E: Element, R: Rng>(b: &mut Builder<'_, E, R>, name: &str, ch: usize, kernel: usize) -> Result<Self> {
        if kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("{name}: same padding needs an odd kernel, got {kernel}")));
        }
        Self::new(b, name, ch, ch, kernel, 1, kernel / 2, ch)
    }

    pub fn forward<E: Element>(&self, ctx: &Ctx<'_, E>, x: &Var<E>) -> Result<Var<E>> {
        ctx.tape.conv1d(
            x,
            ctx.var(self.weight),
            Some(ctx.var(self.bias)),
            self.stride,
            self.padding,
            self.groups,
        )
    }
}

/// Transposed 1-D convolution with bias, weight `[Cin, Cout, K]`.
#[derive(Clone, Debug)]
pub struct ConvTranspose {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl ConvTranspose {
    pub fn new<E: Element, R: Rng>(
        b: &mut Builder<'_, E, R>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        // each output sample sees about cin * kernel / stride inputs
        let fan_in = cin * kernel / stride.max(1);
        let weight = b.weight(&format!("{name}.weight"), &[cin, cout, kernel], fan_in)?;
        let bias = b.constant(&format!("{name}.bias"), &[cout], 0.0, Kind::Param)?;
        Ok(ConvTranspose { weight, bias, stride, padding })
    }

    pub fn forward<E: Element>(&self, ctx: &Ctx<'_, E>, x: &Var<E>) -> Result<Var<E>> {
        ctx.tape
            .conv_transpose1d(x, ctx.var(self.weight), Some(ctx.var(self.bias)), self.stride, self.padding)
    }
}

/// Affine map over the last axis, weight `[Din, Dout]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<E: Element, R: Rng>(b: &mut Builder<'_, E, R>, name: &str, din: usize, dout: usize) -> Result<Self> {
        let weight = b.weight(&format!("{name}.weight"), &[din, dout], din)?;
        let bias = b.constant(&format!("{name}.bias"), &[dout], 0.0, Kind::Param)?;
        Ok(Linear { weight, bias })
    }

    pub fn forward<E: Element>(&self, ctx: &Ctx<'_, E>, x: &Var<E>) -> Result<Var<E>> {
        ctx.tape.linear(x, ctx.var(self.weight), Some(ctx.var(self.bias)))
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new<E: Element, R: Rng>(b: &mut Builder<'_, E, R>, name: &str, ch: usize) -> Result<Self> {
        Ok(BatchNorm {
            gamma: b.constant(&format!("{name}.gamma"), &[ch], 1.0, Kind::Param)?,
            beta: b.constant(&format!("{name}.beta"), &[ch], 0.0, Kind::Param)?,
            running_mean: b.constant(&format!("{name}.running_mean"), &[ch], 0.0, Kind::Buffer)?,
            running_var: b.constant(&format!("{name}.running_var"), &[ch], 1.0, Kind::Buffer)?,
        })
    }

    pub fn forward<E: Element>(&self, ctx: &Ctx<'_, E>, x: &Var<E>) -> Result<Var<E>> {
        let running = BatchNormStats {
            mean: ctx.var(self.running_mean).value().clone(),
            var: ctx.var(self.running_var).value().clone(),
        };
        let (y, stats) = ctx
            .tape
            .batch_norm(x, ctx.var(self.gamma), ctx.var(self.beta), &running, ctx.mode())?;
        if let (BatchNormMode::Train, Some(stats)) = (ctx.mode(), stats) {
            ctx.push_bn_update(BnUpdate { mean: self.running_mean, var: self.running_var, stats });
        }
        Ok(y)
    }
}

/// Residual conformer-style convolution block: pointwise expansion, depthwise
/// conv and pointwise projection, each of the first two followed by batch
/// norm and ReLU, plus a pointwise residual path.
#[derive(Clone, Debug)]
pub struct ResCon {
    pub expand: Conv,
    pub bn1: BatchNorm,
    pub depthwise: Conv,
    pub bn2: BatchNorm,
    pub project: Conv,
    pub residual: Conv,
}

impl ResCon {
    pub fn new<E: Element, R: Rng>(
        b: &mut Builder<'_, E, R>,
        name: &str,
        cin: usize,
        cout: usize,
        growth: usize,
        kernel: usize,
    ) -> Result<Self> {
        let mid = cin * growth;
        Ok(ResCon {
            expand: Conv::pointwise(b, &format!("{name}.expand"), cin, mid)?,
            bn1: BatchNorm::new(b, &format!("{name}.bn1"), mid)?,
            depthwise: Conv::depthwise(b, &format!("{name}.depthwise"), mid, kernel)?,
            bn2: BatchNorm::new(b, &format!("{name}.bn2"), mid)?,
            project: Conv::pointwise(b, &format!("{name}.project"), mid, cout)?,
            residual: Conv::pointwise(b, &format!("{name}.residual"), cin, cout)?,
        })
    }

    pub fn forward<E: Element>(&self, ctx: &Ctx<'_, E>, x: &Var<E>) -> Result<Var<E>> {
        let t = ctx.tape;
        let h = self.expand.forward(ctx, x)?;
        let h = t.relu(&self.bn1.forward(ctx, &h)?);
        let h = self.depthwise.forward(ctx, &h)?;
        let h = t.relu(&self.bn2.forward(ctx, &h)?);
        let h = self.project.forward(ctx, &h)?;
        t.add(&h, &self.residual.forward(ctx, x)?)
    }
}
