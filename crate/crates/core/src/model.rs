//! The U-net: first conv, encoder, bottleneck, decoder, mask gate, output conv.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{MaBlock, Paths};
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Builder, Conv, ConvTranspose, Ctx, ParameterTree, ResCon};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Full,
    /// Attention only in the deepest layer.
    Small,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "small" => Ok(Variant::Small),
            _ => Err(Error::Config(format!("unknown variant `{s}` (expected full or small)"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Full => "full",
            Variant::Small => "small",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Down/Up conv kernel K.
    pub kernel: usize,
    /// Down/Up conv stride S.
    pub stride: usize,
    /// Base channels N.
    pub channels: usize,
    /// Encoder depth L.
    pub depth: usize,
    /// Chunk size C.
    pub chunk: usize,
    pub variant: Variant,
    /// ResCon expansion G0.
    pub growth: usize,
    pub rescon_kernel: usize,
    pub first_kernel: usize,
    pub channel_attention: bool,
    pub global_attention: bool,
    pub local_attention: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kernel: 8,
            stride: 4,
            channels: 60,
            depth: 4,
            chunk: 64,
            variant: Variant::Full,
            growth: 2,
            rescon_kernel: 31,
            first_kernel: 3,
            channel_attention: true,
            global_attention: true,
            local_attention: true,
        }
    }
}

impl ModelConfig {
    pub fn small() -> Self {
        ModelConfig { variant: Variant::Small, ..Self::default() }
    }

    pub fn paths(&self) -> Paths {
        Paths { channel: self.channel_attention, global: self.global_attention, local: self.local_attention }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.channels == 0 || !self.channels.is_multiple_of(6) {
            return fail(format!("channels must be a positive multiple of 6, got {}", self.channels));
        }
        if self.depth == 0 {
            return fail("depth must be at least 1".into());
        }
        if self.stride == 0 || self.kernel <= self.stride || !(self.kernel - self.stride).is_multiple_of(2) {
            return fail(format!(
                "need kernel > stride with an even difference, got K={} S={}",
                self.kernel, self.stride
            ));
        }
        if self.chunk < 4 || !self.chunk.is_multiple_of(4) {
            return fail(format!("chunk size must be a multiple of 4, got {}", self.chunk));
        }
        if self.growth == 0 {
            return fail("growth must be positive".into());
        }
        if self.rescon_kernel.is_multiple_of(2) || self.first_kernel.is_multiple_of(2) {
            return fail("rescon_kernel and first_kernel must be odd".into());
        }
        if self.stride.checked_pow(self.depth as u32).is_none() {
            return fail("stride^depth overflows".into());
        }
        Ok(())
    }

    /// Input lengths are padded to a multiple of this.
    pub fn length_multiple(&self) -> usize {
        self.stride.pow(self.depth as u32)
    }

    pub fn padding(&self) -> usize {
        (self.kernel - self.stride) / 2
    }

    /// Channels after encoder layer `l` (1-based).
    pub fn encoder_channels(&self, l: usize) -> usize {
        self.channels << l
    }

    pub fn has_attention(&self, l: usize) -> bool {
        self.paths().count() > 0 && (self.variant == Variant::Full || l == self.depth)
    }
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub down: Conv,
    pub down_bn: BatchNorm,
    pub rescon: ResCon,
    pub ma: Option<MaBlock>,
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub rescon: ResCon,
    pub ma: Option<MaBlock>,
    pub up: ConvTranspose,
    pub up_bn: BatchNorm,
}

/// Shapes observed during a forward pass.
#[derive(Clone, Debug, Default)]
pub struct Trace {
    pub padded_length: usize,
    pub encoder: Vec<Vec<usize>>,
    pub decoder: Vec<Vec<usize>>,
}

#[derive(Clone, Debug)]
pub struct Manner {
    pub config: ModelConfig,
    pub first: Conv,
    pub first_bn: BatchNorm,
    pub encoder: Vec<EncoderLayer>,
    pub bottleneck: Conv,
    /// In execution order, deepest first.
    pub decoder: Vec<DecoderLayer>,
    pub mask_sigmoid: Conv,
    pub mask_tanh: Conv,
    pub output: Conv,
}

/// Builds the layer structure and a freshly initialized parameter tree.
pub fn build_model<E: Element>(config: &ModelConfig, seed: u64) -> Result<(Manner, ParameterTree<E>)> {
    let mut tree = ParameterTree::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = Manner::new(config, &mut Builder { tree: &mut tree, rng: &mut rng })?;
    Ok((model, tree))
}

impl Manner {
    pub fn new<E: Element, R: Rng>(config: &ModelConfig, b: &mut Builder<'_, E, R>) -> Result<Self> {
        config.validate()?;
        let c = config;
        let n = c.channels;
        let (k, s, pad) = (c.kernel, c.stride, c.padding());
        let first = Conv::new(b, "first.conv", 1, n, c.first_kernel, 1, c.first_kernel / 2, 1)?;
        let first_bn = BatchNorm::new(b, "first.bn", n)?;
        let mut encoder = Vec::with_capacity(c.depth);
        for l in 1..=c.depth {
            let (cin, cout) = (c.encoder_channels(l - 1), c.encoder_channels(l));
            let p = format!("encoder.{l}");
            encoder.push(EncoderLayer {
                down: Conv::new(b, &format!("{p}.down.conv"), cin, cin, k, s, pad, 1)?,
                down_bn: BatchNorm::new(b, &format!("{p}.down.bn"), cin)?,
                rescon: ResCon::new(b, &format!("{p}.rescon"), cin, cout, c.growth, c.rescon_kernel)?,
                ma: if c.has_attention(l) {
                    MaBlock::new(b, &format!("{p}.ma"), cout, c.chunk, c.paths())?
                } else {
                    None
                },
            });
        }
        let deep = c.encoder_channels(c.depth);
        let bottleneck = Conv::pointwise(b, "bottleneck", deep, deep)?;
        let mut decoder = Vec::with_capacity(c.depth);
        for l in (1..=c.depth).rev() {
            let (cin, cout) = (c.encoder_channels(l), c.encoder_channels(l - 1));
            let p = format!("decoder.{l}");
            decoder.push(DecoderLayer {
                rescon: ResCon::new(b, &format!("{p}.rescon"), cin, cout, c.growth, c.rescon_kernel)?,
                ma: if c.has_attention(l) {
                    MaBlock::new(b, &format!("{p}.ma"), cout, c.chunk, c.paths())?
                } else {
                    None
                },
                up: ConvTranspose::new(b, &format!("{p}.up.conv"), cout, cout, k, s, pad)?,
                up_bn: BatchNorm::new(b, &format!("{p}.up.bn"), cout)?,
            });
        }
        Ok(Manner {
            config: config.clone(),
            first,
            first_bn,
            encoder,
            bottleneck,
            decoder,
            mask_sigmoid: Conv::pointwise(b, "mask.sigmoid", n, n)?,
            mask_tanh: Conv::pointwise(b, "mask.tanh", n, n)?,
            output: Conv::pointwise(b, "output", n, 1)?,
        })
    }

    /// `[B, 1, T]` noisy to `[B, 1, T]` enhanced.
    pub fn forward<E: Element>(&self, ctx: &Ctx<'_, E>, noisy: &Var<E>) -> Result<Var<E>> {
        Ok(self.forward_traced(ctx, noisy)?.0)
    }

    pub fn forward_traced<E: Element>(&self, ctx: &Ctx<'_, E>, noisy: &Var<E>) -> Result<(Var<E>, Trace)> {
        let t = ctx.tape;
        let &[_, 1, len] = noisy.shape() else {
            return Err(Error::shape("manner_forward", format!("expected [B, 1, T], got {:?}", noisy.shape())));
        };
        if len == 0 {
            return Err(Error::shape("manner_forward", "empty input"));
        }
        let m = self.config.length_multiple();
        let padded = len.div_ceil(m) * m;
        let mut trace = Trace { padded_length: padded, ..Trace::default() };
        let x = t.pad(noisy, 2, 0, padded - len)?;

        let x0 = t.relu(&self.first_bn.forward(ctx, &self.first.forward(ctx, &x)?)?);
        let mut h = x0.clone();
        let mut skips = Vec::with_capacity(self.encoder.len());
        for layer in &self.encoder {
            h = t.relu(&layer.down_bn.forward(ctx, &layer.down.forward(ctx, &h)?)?);
            h = layer.rescon.forward(ctx, &h)?;
            if let Some(ma) = &layer.ma {
                h = ma.forward(ctx, &h)?;
            }
            trace.encoder.push(h.shape().to_vec());
            skips.push(h.clone());
        }
        h = self.bottleneck.forward(ctx, &h)?;
        for (layer, skip) in self.decoder.iter().zip(skips.iter().rev()) {
            h = t.add(&h, skip)?;
            h = layer.rescon.forward(ctx, &h)?;
            if let Some(ma) = &layer.ma {
                h = ma.forward(ctx, &h)?;
            }
            h = t.relu(&layer.up_bn.forward(ctx, &layer.up.forward(ctx, &h)?)?);
            trace.decoder.push(h.shape().to_vec());
        }
        let mask = self.mask(ctx, &h)?;
        let y = self.output.forward(ctx, &t.mul(&mask, &x0)?)?;
        Ok((t.narrow(&y, 2, 0, len)?, trace))
    }

    /// `relu(σ(conv_a(d)) ⊙ tanh(conv_b(d)))`.
    pub fn mask<E: Element>(&self, ctx: &Ctx<'_, E>, d: &Var<E>) -> Result<Var<E>> {
        mask_gate(ctx, &self.mask_sigmoid, &self.mask_tanh, d)
    }

    /// Inference with running batch-norm statistics; records nothing.
    pub fn enhance<E: Element>(&self, tree: &ParameterTree<E>, noisy: &Tensor<E>) -> Result<Tensor<E>> {
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, tree);
        Ok(self.forward(&ctx, &Var::constant(noisy.clone()))?.into_value())
    }
}

pub fn mask_gate<E: Element>(ctx: &Ctx<'_, E>, a: &Conv, b: &Conv, d: &Var<E>) -> Result<Var<E>> {
    let t = ctx.tape;
    let g = t.mul(&t.sigmoid(&a.forward(ctx, d)?), &t.tanh(&b.forward(ctx, d)?))?;
    Ok(t.relu(&g))
}
