#![allow(dead_code)]

use manner::autograd::BatchNormMode;
use manner::gradcheck::{check_f32_against_f64_with, check_f64_with, Differentiable, GradCheckOptions, GradCheckReport};
use manner::{Ctx, Element, ParameterTree, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn randn(shape: &[usize], seed: u64) -> Tensor<f32> {
    Tensor::randn(shape, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Something with parameters in a tree, mapping one input to one output.
pub trait Block {
    fn run<E: Element>(&self, ctx: &Ctx<'_, E>, x: &Var<E>) -> manner::Result<Var<E>>;
}

/// Scalar loss: the block output against a fixed pseudo-random projection,
/// differentiated with respect to the input and every trainable parameter.
pub struct Projected<'a, B: Block> {
    pub block: &'a B,
    pub tree: &'a ParameterTree<f32>,
}

impl<B: Block> Differentiable for Projected<'_, B> {
    fn eval<E: Element>(&self, tape: &Tape<E>, v: &[Var<E>]) -> manner::Result<Var<E>> {
        let tree = self.tree.cast::<E>();
        let ctx = Ctx::with_params(tape, &tree, &v[1..], BatchNormMode::Train)?;
        let y = self.block.run(&ctx, &v[0])?;
        let w = Var::constant(Tensor::from_fn(y.shape(), |i| E::lit(((i * 7919) % 1000) as f64 / 1000.0 - 0.5)));
        Ok(tape.sum(&tape.mul(&y, &w)?))
    }
}

/// Runs the mixed-precision and the pure 64-bit check on a block and returns both reports.
pub fn check_block<B: Block>(
    block: &B,
    tree: &ParameterTree<f32>,
    x: Tensor<f32>,
    max_coords: Option<usize>,
) -> (GradCheckReport, GradCheckReport) {
    // move off the initialization, where zero biases tie channel-wise maxima
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut inputs = vec![x];
    inputs.extend(tree.param_tensors().into_iter().map(|t| {
        let noise = Tensor::<f32>::randn(t.shape(), &mut rng);
        t.zip_map(&noise, "jitter", |a, n| a + 0.1 * n).unwrap()
    }));
    let f = Projected { block, tree };
    let opts = GradCheckOptions { max_coords_per_input: max_coords, ..GradCheckOptions::for_element::<f64>() };
    let r32 = check_f32_against_f64_with(&f, &inputs, &opts).unwrap();
    let r64 = check_f64_with(&f, &inputs, &opts).unwrap();
    (r32, r64)
}

pub fn assert_grads_ok(name: &str, (r32, r64): (GradCheckReport, GradCheckReport)) {
    assert!(r32.max_rel_error < 1e-3, "{name} f32: {r32:?}");
    assert!(r64.max_rel_error < 1e-6, "{name} f64: {r64:?}");
}

/// Voiced "speech" (harmonics up to 7.8 kHz under a 3 Hz envelope plus a
/// faint breath floor) and the same with white noise added. The broadband
/// floor matters: with empty high bands a silent estimate matches most of
/// the log-magnitude spectrum and training collapses to it.
pub fn synthetic_pair(id: &str, len: usize, seed: u64) -> manner::audio::CorpusPair {
    use manner::audio::{AudioClip, CorpusPair, SAMPLE_RATE};
    use rand::Rng;
    use std::f64::consts::PI;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f0: f64 = rng.gen_range(100.0..250.0);
    let harmonics = (7800.0 / f0) as usize;
    let sr = SAMPLE_RATE as f64;
    let clean: Vec<f32> = (0..len)
        .map(|i| {
            let t = i as f64 / sr;
            let env = 0.5 + 0.5 * (2.0 * PI * 3.0 * t).sin();
            let s: f64 = (1..=harmonics).map(|h| (2.0 * PI * f0 * h as f64 * t).sin() / h as f64).sum();
            (0.2 * env * s + 0.01 * rng.gen_range(-1.0..1.0)) as f32
        })
        .collect();
    let noisy = clean.iter().map(|&c| c + 0.05 * rng.gen_range(-1.0f32..1.0)).collect();
    CorpusPair::new(id, AudioClip::new(noisy, SAMPLE_RATE).unwrap(), AudioClip::new(clean, SAMPLE_RATE).unwrap()).unwrap()
}

/// N=12, L=2, C=16 model with a short schedule and quarter-second segments.
pub fn toy_config(epochs: usize) -> manner::RunConfig {
    let mut cfg = manner::RunConfig::default();
    cfg.model.channels = 12;
    cfg.model.depth = 2;
    cfg.model.chunk = 16;
    cfg.train.epochs = epochs;
    cfg.train.batch_size = 2;
    cfg.train.segment_seconds = 0.25;
    cfg.train.hop_seconds = 0.125;
    cfg.train.lr_max = 1e-3;
    cfg.train.seed = 7;
    cfg
}
