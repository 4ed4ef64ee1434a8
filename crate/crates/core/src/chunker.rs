//! 50%-overlap chunking of the time axis and its exact inverse.
//!
//! The time axis is the last axis; any leading axes are carried along, so a
//! `[B, Ch, T]` input becomes `[B, Ch, P, C]`.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Number of chunks needed to cover `t` samples with chunk size `c`.
pub fn num_chunks(t: usize, c: usize) -> usize {
    let hop = c / 2;
    t.saturating_sub(c).div_ceil(hop) + 1
}

fn validate(c: usize, t: usize) -> Result<()> {
    if c < 2 || !c.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!("chunk size must be even and >= 2, got {c}")));
    }
    if t == 0 {
        return Err(Error::InvalidArgument("cannot chunk an empty signal".into()));
    }
    Ok(())
}

/// Chunked tensor plus the metadata needed to invert the split.
#[derive(Clone, Debug)]
pub struct ChunkedView<E: Element = f32> {
    pub data: Tensor<E>,
    pub original_length: usize,
    pub hop: usize,
}

impl<E: Element> ChunkedView<E> {
    pub fn chunk_size(&self) -> usize {
        self.hop * 2
    }

    pub fn num_chunks(&self) -> usize {
        self.data.dim(self.data.rank() - 2)
    }

    fn check(&self) -> Result<()> {
        let r = self.data.rank();
        if r < 2 {
            return Err(Error::shape("merge", format!("chunked data needs rank >= 2, got {r}")));
        }
        let (p, c) = (self.data.dim(r - 2), self.data.dim(r - 1));
        if self.hop == 0 || c != 2 * self.hop {
            return Err(Error::shape("merge", format!("chunk size {c} inconsistent with hop {}", self.hop)));
        }
        if self.original_length == 0 || p != num_chunks(self.original_length, c) {
            return Err(Error::shape(
                "merge",
                format!("{p} chunks of {c} do not match original length {}", self.original_length),
            ));
        }
        Ok(())
    }
}

/// Splits the last axis of `x` into `P` chunks of `c` samples with hop `c/2`.
pub fn chunk<E: Element>(x: &Tensor<E>, c: usize) -> Result<ChunkedView<E>> {
    let tape = Tape::new();
    let v = tape.chunk(&Var::constant(x.clone()), c)?;
    Ok(ChunkedView {
        data: v.into_value(),
        original_length: *x.shape().last().unwrap_or(&0),
        hop: c / 2,
    })
}

/// Overlap-add with per-sample averaging, truncated to the original length.
pub fn merge<E: Element>(view: &ChunkedView<E>) -> Result<Tensor<E>> {
    view.check()?;
    let tape = Tape::new();
    Ok(tape.merge(&Var::constant(view.data.clone()), view.original_length)?.into_value())
}

fn coverage(t: usize, p: usize, hop: usize) -> Vec<usize> {
    let mut cnt = vec![0usize; t];
    for q in 0..p {
        for s in cnt.iter_mut().skip(q * hop).take(2 * hop) {
            *s += 1;
        }
    }
    cnt
}

impl<E: Element> Tape<E> {
    /// Differentiable [`chunk`]: `[.., T]` to `[.., P, C]`.
    pub fn chunk(&self, x: &Var<E>, c: usize) -> Result<Var<E>> {
        let shape = x.shape().to_vec();
        let Some(&t) = shape.last() else {
            return Err(Error::shape("chunk", "scalar input"));
        };
        validate(c, t)?;
        let hop = c / 2;
        let p = num_chunks(t, c);
        let outer = x.value().numel() / t;
        let src = x.value().data();
        let mut out = vec![E::zero(); outer * p * c];
        for o in 0..outer {
            let row = &src[o * t..(o + 1) * t];
            for q in 0..p {
                let start = q * hop;
                let n = c.min(t.saturating_sub(start));
                let d = (o * p + q) * c;
                out[d..d + n].copy_from_slice(&row[start..start + n]);
            }
        }
        let mut oshape = shape.clone();
        oshape.pop();
        oshape.extend([p, c]);
        Ok(self.record(
            Tensor::from_parts(oshape, out),
            &[x],
            Box::new(move |g, _| {
                let mut d = vec![E::zero(); outer * t];
                for o in 0..outer {
                    for q in 0..p {
                        let start = q * hop;
                        let n = c.min(t.saturating_sub(start));
                        let s = (o * p + q) * c;
                        for (dst, &gv) in d[o * t + start..o * t + start + n].iter_mut().zip(&g.data()[s..s + n]) {
                            *dst += gv;
                        }
                    }
                }
                Ok(vec![Some(Tensor::from_parts(shape.clone(), d))])
            }),
        ))
    }

    /// Differentiable [`merge`]: `[.., P, C]` to `[.., original_length]`.
    pub fn merge(&self, x: &Var<E>, original_length: usize) -> Result<Var<E>> {
        let shape = x.shape().to_vec();
        let r = shape.len();
        if r < 2 {
            return Err(Error::shape("merge", format!("chunked data needs rank >= 2, got {r}")));
        }
        let (p, c) = (shape[r - 2], shape[r - 1]);
        validate(c, original_length)?;
        if p != num_chunks(original_length, c) {
            return Err(Error::shape(
                "merge",
                format!("{p} chunks of {c} do not match original length {original_length}"),
            ));
        }
        let hop = c / 2;
        let t = original_length;
        let outer = x.value().numel() / (p * c);
        let inv: Vec<E> = coverage(t, p, hop).iter().map(|&n| E::one() / E::lit(n as f64)).collect();
        let src = x.value().data();
        let mut out = vec![E::zero(); outer * t];
        for o in 0..outer {
            let row = &mut out[o * t..(o + 1) * t];
            for q in 0..p {
                let start = q * hop;
                let n = c.min(t.saturating_sub(start));
                let s = (o * p + q) * c;
                for (dst, &v) in row[start..start + n].iter_mut().zip(&src[s..s + n]) {
                    *dst += v;
                }
            }
            for (v, &w) in row.iter_mut().zip(&inv) {
                *v *= w;
            }
        }
        let mut oshape = shape[..r - 2].to_vec();
        oshape.push(t);
        Ok(self.record(
            Tensor::from_parts(oshape, out),
            &[x],
            Box::new(move |g, _| {
                let mut d = vec![E::zero(); outer * p * c];
                for o in 0..outer {
                    let gr = &g.data()[o * t..(o + 1) * t];
                    for q in 0..p {
                        let start = q * hop;
                        let n = c.min(t.saturating_sub(start));
                        let s = (o * p + q) * c;
                        for k in 0..n {
                            d[s + k] = gr[start + k] * inv[start + k];
                        }
                    }
                }
                Ok(vec![Some(Tensor::from_parts(shape.clone(), d))])
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunk_count_examples() {
        assert_eq!(num_chunks(1000, 64), 31);
        assert_eq!(num_chunks(64, 64), 1);
        assert_eq!(num_chunks(96, 64), 2);
        assert_eq!(num_chunks(1, 64), 1);
        assert_eq!(num_chunks(65, 64), 2);
    }

    #[test]
    fn odd_chunk_size_is_rejected() {
        let x = Tensor::<f32>::zeros(&[1, 10]);
        assert!(chunk(&x, 7).is_err());
        assert!(chunk(&x, 0).is_err());
    }

    #[test]
    fn overlapping_chunks_share_samples() {
        let x = Tensor::<f32>::from_fn(&[1, 96], |i| i as f32);
        let v = chunk(&x, 64).unwrap();
        assert_eq!(v.data.shape(), &[1, 2, 64]);
        assert_eq!(&v.data.data()[32..64], &v.data.data()[64..96]);
        assert_eq!(v.data.data()[64], 32.0);
    }

    #[test]
    fn tail_is_zero_padded() {
        let x = Tensor::<f32>::ones(&[2, 1000]);
        let v = chunk(&x, 64).unwrap();
        assert_eq!(v.data.shape(), &[2, 31, 64]);
        // padded length 1024: the last chunk holds samples 960..1024
        let last = &v.data.data()[30 * 64..31 * 64];
        assert!(last[..40].iter().all(|&s| s == 1.0));
        assert!(last[40..].iter().all(|&s| s == 0.0));
    }

    #[test]
    fn merge_rejects_inconsistent_metadata() {
        let v = ChunkedView {
            data: Tensor::<f32>::zeros(&[1, 3, 64]),
            original_length: 1000,
            hop: 32,
        };
        assert!(merge(&v).is_err());
        let v = ChunkedView {
            data: Tensor::<f32>::zeros(&[1, 31, 64]),
            original_length: 1000,
            hop: 16,
        };
        assert!(merge(&v).is_err());
    }
}
