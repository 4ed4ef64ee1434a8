//! Channel, global and local attention, and the multi-view attention block
//! combining them.

use rand::Rng;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{Builder, Conv, Ctx, Linear};
use crate::tensor::{Element, Tensor};

/// Which attention paths an MA block contains.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Paths {
    pub channel: bool,
    pub global: bool,
    pub local: bool,
}

impl Paths {
    pub const ALL: Paths = Paths { channel: true, global: true, local: true };

    pub fn count(&self) -> usize {
        [self.channel, self.global, self.local].iter().filter(|&&p| p).count()
    }
}

/// Kernel of the F convolution reducing pooled maps to one channel.
pub const LOCAL_F_KERNEL: usize = 7;

/// Squeeze-style gating of channels from time-pooled statistics.
#[derive(Clone, Debug)]
pub struct ChannelAttention {
    pub w0: Linear,
    pub w1: Linear,
}

impl ChannelAttention {
    pub fn new<E: Element, R: Rng>(b: &mut Builder<'_, E, R>, name: &str, ch: usize) -> Result<Self> {
        if !ch.is_multiple_of(2) || ch == 0 {
            return Err(Error::Config(format!("channel attention needs an even channel count, got {ch}")));
        }
        Ok(ChannelAttention {
            w0: Linear::new(b, &format!("{name}.w0"), ch, ch / 2)?,
            w1: Linear::new(b, &format!("{name}.w1"), ch / 2, ch)?,
        })
    }

    /// The weights `α_C`, shape `[B, Ch, 1]`.
    pub fn weights<E: Element>(&self, ctx: &Ctx<'_, E>, x: &Var<E>) -> Result<Var<E>> {
        let t = ctx.tape;
        let &[b, ch, _] = x.shape() else {
            return Err(Error::shape("channel_attention", format!("expected [B, Ch, T], got {:?}", x.shape())));
        };
        let mlp = |pooled: Var<E>| -> Result<Var<E>> {
            let h = self.w0.forward(ctx, &t.reshape(&pooled, &[b, ch])?)?;
            self.w1.forward(ctx, &t.relu(&h))
        };
        let avg = mlp(t.mean_axis(x, 2)?)?;
        let max = mlp(t.max_axis(x, 2)?)?;
        let a = t.sigmoid(&t.add(&avg, &max)?);
        t.reshape(&a, &[b, ch, 1])
    }

    pub fn forward<E: Element>(&self, ctx: &Ctx<'_, E>, x: &Var<E>) -> Result<Var<E>> {
        let a = self.weights(ctx, x)?;
        ctx.tape.mul_broadcast(x, &a)
    }
}

/// Single-head self-attention across chunks; chunk contents are features.
#[derive(Clone, Debug)]
pub struct GlobalAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wout: Linear,
}

impl GlobalAttention {
    pub fn new<E: Element, R: Rng>(b: &mut Builder<'_, E, R>, name: &str, c: usize) -> Result<Self> {
        Ok(GlobalAttention {
            wq: Linear::new(b, &format!("{name}.wq"), c, c)?,
            wk: Linear::new(b, &format!("{name}.wk"), c, c)?,
            wv: Linear::new(b, &format!("{name}.wv"), c, c)?,
            wout: Linear::new(b, &format!("{name}.wout"), c, c)?,
        })
    }

    /// Attention weights `α_G`, shape `[B·Ch, P, P]`, and values `V`.
    fn scores<E: Element>(&self, ctx: &Ctx<'_, E>, x: &Var<E>) -> Result<(Var<E>, Var<E>)> {
        let t = ctx.tape;
        let &[b, ch, p, c] = x.shape() else {
            return Err(Error::shape("global_attention", format!("expected [B, Ch, P, C], got {:?}", x.shape())));
        };
        let flat = t.reshape(x, &[b * ch, p, c])?;
        let q = self.wq.forward(ctx, &flat)?;
        let k = self.wk.forward(ctx, &flat)?;
        let v = self.wv.forward(ctx, &flat)?;
        let s = t.matmul(&q, false, &k, true)?;
        let s = t.scale(&s, E::lit(1.0 / (c as f64).sqrt()));
        Ok((t.softmax(&s)?, v))
    }

    pub fn weights<E: Element>(&self, ctx: &Ctx<'_, E>, x: &Var<E>) -> Result<Tensor<E>> {
        Ok(self.scores(ctx, x)?.0.into_value())
    }

    pub fn forward<E: Element>(&self, ctx: &Ctx<'_, E>, x: &Var<E>) -> Result<Var<E>> {
        let t = ctx.tape;
        let (a, v) = self.scores(ctx, x)?;
        let o = self.wout.forward(ctx, &t.matmul(&a, false, &v, false)?)?;
        t.reshape(&o, x.shape())
    }
}

/// Convolutional attention within each chunk.
#[derive(Clone, Debug)]
pub struct LocalAttention {
    pub depthwise: Conv,
    pub f: Conv,
}

impl LocalAttention {
    pub fn new<E: Element, R: Rng>(b: &mut Builder<'_, E, R>, name: &str, ch: usize, c: usize) -> Result<Self> {
        if c < 4 || !c.is_multiple_of(4) {
            return Err(Error::Config(format!("local attention needs chunk size divisible by 4, got {c}")));
        }
        Ok(LocalAttention {
            depthwise: Conv::depthwise(b, &format!("{name}.depthwise"), ch, c / 2 - 1)?,
            f: Conv::new(b, &format!("{name}.f"), 2, 1, LOCAL_F_KERNEL, 1, LOCAL_F_KERNEL / 2, 1)?,
        })
    }

    /// `x` as `[B·P, Ch, C]` plus the weights `α_L`, shape `[B·P, 1, C]`.
    fn fold_and_weigh<E: Element>(&self, ctx: &Ctx<'_, E>, x: &Var<E>) -> Result<(Var<E>, Var<E>)> {
        let t = ctx.tape;
        let &[b, ch, p, c] = x.shape() else {
            return Err(Error::shape("local_attention", format!("expected [B, Ch, P, C], got {:?}", x.shape())));
        };
        let folded = t.reshape(&t.permute(x, &[0, 2, 1, 3])?, &[b * p, ch, c])?;
        let h = self.depthwise.forward(ctx, &folded)?;
        let pooled = t.concat(&[&t.mean_axis(&h, 1)?, &t.max_axis(&h, 1)?], 1)?;
        let a = t.sigmoid(&self.f.forward(ctx, &pooled)?);
        Ok((folded, a))
    }

    pub fn weights<E: Element>(&self, ctx: &Ctx<'_, E>, x: &Var<E>) -> Result<Tensor<E>> {
        Ok(self.fold_and_weigh(ctx, x)?.1.into_value())
    }

    pub fn forward<E: Element>(&self, ctx: &Ctx<'_, E>, x: &Var<E>) -> Result<Var<E>> {
        let t = ctx.tape;
        let &[b, ch, p, c] = x.shape() else {
            return Err(Error::shape("local_attention", format!("expected [B, Ch, P, C], got {:?}", x.shape())));
        };
        let (folded, a) = self.fold_and_weigh(ctx, x)?;
        let y = t.mul_broadcast(&folded, &a)?;
        t.permute(&t.reshape(&y, &[b, p, ch, c])?, &[0, 2, 1, 3])
    }
}

/// Multi-view attention: three channel-reduced paths, concatenation, an
/// exit convolution and a gated residual.
#[derive(Clone, Debug)]
pub struct MaBlock {
    pub chunk: usize,
    pub channel: Option<(Conv, ChannelAttention)>,
    pub global: Option<(Conv, GlobalAttention)>,
    pub local: Option<(Conv, LocalAttention)>,
    pub exit: Conv,
    pub gate_sigmoid: Conv,
    pub gate_tanh: Conv,
}

impl MaBlock {
    /// `None` when every path is disabled.
    pub fn new<E: Element, R: Rng>(
        b: &mut Builder<'_, E, R>,
        name: &str,
        n: usize,
        chunk: usize,
        paths: Paths,
    ) -> Result<Option<Self>> {
        if paths.count() == 0 {
            return Ok(None);
        }
        if !n.is_multiple_of(6) {
            return Err(Error::Config(format!("MA block needs channels divisible by 6, got {n}")));
        }
        let third = n / 3;
        let entry = |b: &mut Builder<'_, E, R>, path: &str| Conv::pointwise(b, &format!("{name}.{path}.entry"), n, third);
        let channel = if paths.channel {
            Some((entry(b, "channel")?, ChannelAttention::new(b, &format!("{name}.channel"), third)?))
        } else {
            None
        };
        let global = if paths.global {
            Some((entry(b, "global")?, GlobalAttention::new(b, &format!("{name}.global"), chunk)?))
        } else {
            None
        };
        let local = if paths.local {
            Some((entry(b, "local")?, LocalAttention::new(b, &format!("{name}.local"), third, chunk)?))
        } else {
            None
        };
        Ok(Some(MaBlock {
            chunk,
            channel,
            global,
            local,
            exit: Conv::pointwise(b, &format!("{name}.exit"), third * paths.count(), n)?,
            gate_sigmoid: Conv::pointwise(b, &format!("{name}.gate_sigmoid"), n, n)?,
            gate_tanh: Conv::pointwise(b, &format!("{name}.gate_tanh"), n, n)?,
        }))
    }

    pub fn forward<E: Element>(&self, ctx: &Ctx<'_, E>, x: &Var<E>) -> Result<Var<E>> {
        let t = ctx.tape;
        let len = *x.shape().last().unwrap_or(&0);
        let mut outs = Vec::with_capacity(3);
        if let Some((entry, att)) = &self.channel {
            outs.push(att.forward(ctx, &entry.forward(ctx, x)?)?);
        }
        if let Some((entry, att)) = &self.global {
            let h = t.chunk(&entry.forward(ctx, x)?, self.chunk)?;
            outs.push(t.merge(&att.forward(ctx, &h)?, len)?);
        }
        if let Some((entry, att)) = &self.local {
            let h = t.chunk(&entry.forward(ctx, x)?, self.chunk)?;
            outs.push(t.merge(&att.forward(ctx, &h)?, len)?);
        }
        let refs: Vec<&Var<E>> = outs.iter().collect();
        let z = self.exit.forward(ctx, &t.concat(&refs, 1)?)?;
        let g = t.mul(
            &t.sigmoid(&self.gate_sigmoid.forward(ctx, &z)?),
            &t.tanh(&self.gate_tanh.forward(ctx, &z)?),
        )?;
        let g = t.relu(&g);
        t.add(x, &t.mul(&z, &g)?)
    }
}
