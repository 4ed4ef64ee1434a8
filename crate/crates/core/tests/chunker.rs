use manner::chunker::{chunk, merge, num_chunks, ChunkedView};
use manner::gradcheck::finite_diff_check;
use manner::{Tape, Tensor, Var};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn randn(shape: &[usize], seed: u64) -> Tensor<f32> {
    Tensor::randn(shape, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn roundtrip_error(ch: usize, t: usize, c: usize, seed: u64) -> f32 {
    let x = randn(&[ch, t], seed);
    let y = merge(&chunk(&x, c).unwrap()).unwrap();
    assert_eq!(y.shape(), x.shape());
    x.data().iter().zip(y.data()).fold(0.0, |m, (a, b)| m.max((a - b).abs()))
}

#[test]
fn roundtrip_fixed_lengths() {
    for t in [1, 63, 64, 65, 1000] {
        assert!(roundtrip_error(3, t, 64, t as u64) < 1e-6, "T={t}");
    }
}

#[test]
fn p_for_thousand_samples() {
    let v = chunk(&randn(&[4, 1000], 1), 64).unwrap();
    assert_eq!(v.num_chunks(), 31);
    assert_eq!(v.hop, 32);
    assert_eq!((v.num_chunks() - 1) * v.hop + v.chunk_size(), 1024);
}

#[test]
fn single_chunk_cases() {
    let x = randn(&[2, 64], 2);
    let v = chunk(&x, 64).unwrap();
    assert_eq!(v.data.shape(), &[2, 1, 64]);
    assert_eq!(v.data.data(), x.data());

    // P = 1 merge truncates the chunk
    let data = Tensor::<f32>::from_fn(&[1, 1, 8], |i| i as f32);
    let out = merge(&ChunkedView { data, original_length: 5, hop: 4 }).unwrap();
    assert_eq!(out.data(), &[0.0, 1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn all_ones_chunks_merge_to_ones() {
    let view = ChunkedView { data: Tensor::<f32>::ones(&[3, 2, 64]), original_length: 96, hop: 32 };
    let out = merge(&view).unwrap();
    assert_eq!(out.shape(), &[3, 96]);
    assert!(out.data().iter().all(|&v| v == 1.0));
}

#[test]
fn batched_leading_axes() {
    let x = randn(&[2, 3, 150], 3);
    let v = chunk(&x, 16).unwrap();
    assert_eq!(v.data.shape(), &[2, 3, num_chunks(150, 16), 16]);
    assert_eq!(merge(&v).unwrap(), x);
}

#[test]
fn merge_chunk_gradient_is_identity() {
    let tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::from_fn(&[2, 77], |i| (i as f64).sin()));
    let w = Var::constant(Tensor::from_fn(&[2, 77], |i| (i as f64 * 0.37).cos()));
    let y = tape.merge(&tape.chunk(&x, 16).unwrap(), 77).unwrap();
    let loss = tape.sum(&tape.mul(&y, &w).unwrap());
    let g = tape.backward(&loss).unwrap();
    for (a, b) in g.wrt(&x).data().iter().zip(w.value().data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn chunk_and_merge_gradients_match_finite_differences() {
    let x = randn(&[2, 37], 4);
    let weights = randn(&[2, num_chunks(37, 12), 12], 5);
    let r = finite_diff_check(
        |t, v| {
            let c = t.chunk(&v[0], 12)?;
            let p = t.mul(&c, &Var::constant(weights.clone()))?;
            let m = t.merge(&p, 37)?;
            Ok(t.sum(&t.mul(&m, &m)?))
        },
        &[x],
        1e-2,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-3, "{r:?}");
}

proptest! {
    #[test]
    fn roundtrip_is_identity(ch in 1usize..5, t in 1usize..400, half in 1usize..40, seed in 0u64..10_000) {
        let c = 2 * half;
        prop_assert!(roundtrip_error(ch, t, c, seed) < 1e-6);
    }

    #[test]
    fn coverage_and_overhead(t in 1usize..5000, half in 1usize..64) {
        let c = 2 * half;
        let p = num_chunks(t, c);
        prop_assert!((p - 1) * half + c >= t);
        prop_assert!(p * c >= t);
        prop_assert!((p * c) as f64 <= (2.0 + c as f64 / t as f64) * t as f64);
        // minimal: one fewer chunk would not cover
        if p > 1 {
            prop_assert!((p - 2) * half + c < t);
        }
    }
}
