use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::{numel, Element, Tensor};

/// Splits `shape` around `axis` into `(outer, len, inner)`.
pub(crate) fn around(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::shape(op, format!("axis {axis} out of range for {shape:?}")));
    }
    Ok(())
}

/// Strides of `small` when broadcast against `big` (0 on broadcast axes).
fn broadcast_strides(big: &[usize], small: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; big.len()];
    let mut acc = 1;
    for i in (0..big.len()).rev() {
        if small[i] != 1 || big[i] == 1 {
            strides[i] = acc;
        }
        acc *= small[i];
    }
    strides
}

/// Visits every flat index of `big` with the matching flat index of `small`.
fn for_each_broadcast(big: &[usize], small: &[usize], mut f: impl FnMut(usize, usize)) {
    let rank = big.len();
    let bs = broadcast_strides(big, small);
    if rank == 0 {
        f(0, 0);
        return;
    }
    let inner = big[rank - 1];
    let inner_stride = bs[rank - 1];
    let mut idx = vec![0usize; rank];
    let mut flat = 0;
    let total = numel(big);
    while flat < total {
        let base: usize = idx[..rank - 1].iter().zip(&bs).map(|(i, s)| i * s).sum();
        for t in 0..inner {
            f(flat + t, base + t * inner_stride);
        }
        flat += inner;
        let mut axis = rank - 1;
        while axis > 0 {
            axis -= 1;
            idx[axis] += 1;
            if idx[axis] < big[axis] {
                break;
            }
            idx[axis] = 0;
        }
    }
}

impl<E: Element> Tape<E> {
    fn unary(
        &self,
        a: &Var<E>,
        f: impl Fn(E) -> E,
        // derivative from (input, output)
        df: impl Fn(E, E) -> E + 'static,
    ) -> Var<E> {
        let out = a.value.map(f);
        let (x, y) = (a.value.clone(), out.clone());
        self.record(
            out,
            &[a],
            Box::new(move |g, _| {
                let d = x
                    .data()
                    .iter()
                    .zip(y.data())
                    .zip(g.data())
                    .map(|((&xi, &yi), &gi)| gi * df(xi, yi))
                    .collect();
                Ok(vec![Some(Tensor::from_parts(x.shape().to_vec(), d))])
            }),
        )
    }

    pub fn relu(&self, a: &Var<E>) -> Var<E> {
        self.unary(a, |v| v.max(E::zero()), |x, _| if x > E::zero() { E::one() } else { E::zero() })
    }

    pub fn sigmoid(&self, a: &Var<E>) -> Var<E> {
        self.unary(a, |v| E::one() / (E::one() + (-v).exp()), |_, y| y * (E::one() - y))
    }

    pub fn tanh(&self, a: &Var<E>) -> Var<E> {
        self.unary(a, |v| v.tanh(), |_, y| E::one() - y * y)
    }

    pub fn abs(&self, a: &Var<E>) -> Var<E> {
        self.unary(a, |v| v.abs(), |x, _| {
            if x > E::zero() {
                E::one()
            } else if x < E::zero() {
                -E::one()
            } else {
                E::zero()
            }
        })
    }

    pub fn log(&self, a: &Var<E>) -> Var<E> {
        self.unary(a, |v| v.ln(), |x, _| E::one() / x)
    }

    /// Square root; the derivative at 0 is taken as 0.
    pub fn sqrt(&self, a: &Var<E>) -> Var<E> {
        self.unary(a, |v| v.sqrt(), |_, y| {
            if y > E::zero() {
                E::lit(0.5) / y
            } else {
                E::zero()
            }
        })
    }

    /// `max(a, lo)`; no gradient flows through clamped entries.
    pub fn clamp_min(&self, a: &Var<E>, lo: E) -> Var<E> {
        self.unary(a, move |v| v.max(lo), move |x, _| if x > lo { E::one() } else { E::zero() })
    }

    pub fn scale(&self, a: &Var<E>, c: E) -> Var<E> {
        self.unary(a, move |v| v * c, move |_, _| c)
    }

    pub fn add_scalar(&self, a: &Var<E>, c: E) -> Var<E> {
        self.unary(a, move |v| v + c, |_, _| E::one())
    }

    pub fn add(&self, a: &Var<E>, b: &Var<E>) -> Result<Var<E>> {
        let out = a.value.zip_map(&b.value, "add", |x, y| x + y)?;
        Ok(self.record(out, &[a, b], Box::new(|g, _| Ok(vec![Some(g.clone()), Some(g.clone())]))))
    }

    pub fn sub(&self, a: &Var<E>, b: &Var<E>) -> Result<Var<E>> {
        let out = a.value.zip_map(&b.value, "sub", |x, y| x - y)?;
        Ok(self.record(
            out,
            &[a, b],
            Box::new(|g, needs| Ok(vec![Some(g.clone()), needs[1].then(|| g.map(|v| -v))])),
        ))
    }

    pub fn mul(&self, a: &Var<E>, b: &Var<E>) -> Result<Var<E>> {
        let out = a.value.zip_map(&b.value, "mul", |x, y| x * y)?;
        let (av, bv) = (a.value.clone(), b.value.clone());
        Ok(self.record(
            out,
            &[a, b],
            Box::new(move |g, needs| {
                let da = if needs[0] { Some(g.zip_map(&bv, "mul", |gi, y| gi * y)?) } else { None };
                let db = if needs[1] { Some(g.zip_map(&av, "mul", |gi, x| gi * x)?) } else { None };
                Ok(vec![da, db])
            }),
        ))
    }

    pub fn div(&self, a: &Var<E>, b: &Var<E>) -> Result<Var<E>> {
        let out = a.value.zip_map(&b.value, "div", |x, y| x / y)?;
        let (bv, ov) = (b.value.clone(), out.clone());
        Ok(self.record(
            out,
            &[a, b],
            Box::new(move |g, needs| {
                let da = if needs[0] { Some(g.zip_map(&bv, "div", |gi, y| gi / y)?) } else { None };
                let db = if needs[1] {
                    let q = ov.zip_map(&bv, "div", |o, y| o / y)?;
                    Some(g.zip_map(&q, "div", |gi, qi| -gi * qi)?)
                } else {
                    None
                };
                Ok(vec![da, db])
            }),
        ))
    }

    /// `a * s` where `s` has the rank of `a` and each dimension of `s` is
    /// either equal to that of `a` or 1 (broadcast).
    pub fn mul_broadcast(&self, a: &Var<E>, s: &Var<E>) -> Result<Var<E>> {
        let (ash, ssh) = (a.shape().to_vec(), s.shape().to_vec());
        if ash.len() != ssh.len() || ash.iter().zip(&ssh).any(|(&x, &y)| y != x && y != 1) {
            return Err(Error::shape("mul_broadcast", format!("{ash:?} by {ssh:?}")));
        }
        let mut out = vec![E::zero(); a.value.numel()];
        let (ad, sd) = (a.value.data(), s.value.data());
        for_each_broadcast(&ash, &ssh, |i, j| out[i] = ad[i] * sd[j]);
        let (av, sv) = (a.value.clone(), s.value.clone());
        Ok(self.record(
            Tensor::from_parts(ash.clone(), out),
            &[a, s],
            Box::new(move |g, needs| {
                let gd = g.data();
                let da = needs[0].then(|| {
                    let mut d = vec![E::zero(); gd.len()];
                    let sd = sv.data();
                    for_each_broadcast(&ash, &ssh, |i, j| d[i] = gd[i] * sd[j]);
                    Tensor::from_parts(ash.clone(), d)
                });
                let ds = needs[1].then(|| {
                    let mut d = vec![E::zero(); sv.numel()];
                    let ad = av.data();
                    for_each_broadcast(&ash, &ssh, |i, j| d[j] += gd[i] * ad[i]);
                    Tensor::from_parts(ssh.clone(), d)
                });
                Ok(vec![da, ds])
            }),
        ))
    }

    pub fn sum(&self, a: &Var<E>) -> Var<E> {
        let shape = a.shape().to_vec();
        self.record(
            Tensor::scalar(a.value.sum()),
            &[a],
            Box::new(move |g, _| Ok(vec![Some(Tensor::full(&shape, g.data()[0]))])),
        )
    }

    pub fn mean(&self, a: &Var<E>) -> Var<E> {
        let n = E::lit(a.value.numel() as f64);
        let s = self.sum(a);
        self.scale(&s, E::one() / n)
    }

    /// Mean over `axis`, keeping it with length 1.
    pub fn mean_axis(&self, a: &Var<E>, axis: usize) -> Result<Var<E>> {
        check_axis("mean_axis", a.shape(), axis)?;
        let shape = a.shape().to_vec();
        let (outer, n, inner) = around(&shape, axis);
        if n == 0 {
            return Err(Error::shape("mean_axis", "empty axis"));
        }
        let inv = E::one() / E::lit(n as f64);
        let x = a.value.data();
        let mut out = vec![E::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let row = &x[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        let mut oshape = shape.clone();
        oshape[axis] = 1;
        Ok(self.record(
            Tensor::from_parts(oshape, out),
            &[a],
            Box::new(move |g, _| {
                let gd = g.data();
                let d = Tensor::from_fn(&shape, |flat| {
                    let o = flat / (n * inner);
                    let i = flat % inner;
                    gd[o * inner + i] * inv
                });
                Ok(vec![Some(d)])
            }),
        ))
    }

    /// Max over `axis`, keeping it with length 1. The gradient flows to the
    /// first position attaining the maximum.
    pub fn max_axis(&self, a: &Var<E>, axis: usize) -> Result<Var<E>> {
        check_axis("max_axis", a.shape(), axis)?;
        let shape = a.shape().to_vec();
        let (outer, n, inner) = around(&shape, axis);
        if n == 0 {
            return Err(Error::shape("max_axis", "empty axis"));
        }
        let x = a.value.data();
        let mut out = vec![E::neg_infinity(); outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                for i in 0..inner {
                    let v = x[(o * n + k) * inner + i];
                    let slot = o * inner + i;
                    if v > out[slot] || k == 0 {
                        out[slot] = v;
                        arg[slot] = (o * n + k) * inner + i;
                    }
                }
            }
        }
        let mut oshape = shape.clone();
        oshape[axis] = 1;
        Ok(self.record(
            Tensor::from_parts(oshape, out),
            &[a],
            Box::new(move |g, _| {
                let mut d = vec![E::zero(); numel(&shape)];
                for (slot, &src) in arg.iter().enumerate() {
                    d[src] += g.data()[slot];
                }
                Ok(vec![Some(Tensor::from_parts(shape.clone(), d))])
            }),
        ))
    }

    pub fn reshape(&self, a: &Var<E>, shape: &[usize]) -> Result<Var<E>> {
        let out = a.value.reshape(shape)?;
        let orig = a.shape().to_vec();
        Ok(self.record(out, &[a], Box::new(move |g, _| Ok(vec![Some(g.reshape(&orig)?)]))))
    }

    /// Output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, a: &Var<E>, perm: &[usize]) -> Result<Var<E>> {
        let shape = a.shape().to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", format!("{perm:?} is not a permutation of {shape:?}")));
        }
        let oshape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let out = Tensor::from_parts(oshape.clone(), kernels::permute(a.value.data(), &shape, perm));
        let mut inverse = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        Ok(self.record(
            out,
            &[a],
            Box::new(move |g, _| {
                Ok(vec![Some(Tensor::from_parts(
                    shape.clone(),
                    kernels::permute(g.data(), &oshape, &inverse),
                ))])
            }),
        ))
    }

    pub fn concat(&self, parts: &[&Var<E>], axis: usize) -> Result<Var<E>> {
        let first = parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
        check_axis("concat", first.shape(), axis)?;
        let base = first.shape();
        for p in parts {
            let ok = p.shape().len() == base.len()
                && p.shape().iter().zip(base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::shape("concat", format!("{:?} vs {:?} on axis {axis}", p.shape(), base)));
            }
        }
        let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = lens.iter().sum();
        let (outer, _, inner) = around(base, axis);
        let mut oshape = base.to_vec();
        oshape[axis] = total;
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &len) in parts.iter().zip(&lens) {
                out.extend_from_slice(&p.value.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let shapes: Vec<Vec<usize>> = parts.iter().map(|p| p.shape().to_vec()).collect();
        Ok(self.record(
            Tensor::from_parts(oshape, out),
            parts,
            Box::new(move |g, needs| {
                let gd = g.data();
                let mut offset = 0;
                let mut res = Vec::with_capacity(lens.len());
                for ((len, shape), &need) in lens.iter().zip(&shapes).zip(needs) {
                    if need {
                        let mut d = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            d.extend_from_slice(&gd[start..start + len * inner]);
                        }
                        res.push(Some(Tensor::from_parts(shape.clone(), d)));
                    } else {
                        res.push(None);
                    }
                    offset += len;
                }
                Ok(res)
            }),
        ))
    }

    /// Slice `[start, start + len)` of `axis`.
    pub fn narrow(&self, a: &Var<E>, axis: usize, start: usize, len: usize) -> Result<Var<E>> {
        check_axis("narrow", a.shape(), axis)?;
        let shape = a.shape().to_vec();
        if start + len > shape[axis] {
            return Err(Error::shape("narrow", format!("[{start}, {}) exceeds {shape:?} on axis {axis}", start + len)));
        }
        let (outer, n, inner) = around(&shape, axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * n + start) * inner;
            out.extend_from_slice(&a.value.data()[s..s + len * inner]);
        }
        let mut oshape = shape.clone();
        oshape[axis] = len;
        Ok(self.record(
            Tensor::from_parts(oshape, out),
            &[a],
            Box::new(move |g, _| {
                let mut d = vec![E::zero(); numel(&shape)];
                for o in 0..outer {
                    let s = (o * n + start) * inner;
                    d[s..s + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                Ok(vec![Some(Tensor::from_parts(shape.clone(), d))])
            }),
        ))
    }

    /// Zero-pads `axis` with `before` and `after` entries.
    pub fn pad(&self, a: &Var<E>, axis: usize, before: usize, after: usize) -> Result<Var<E>> {
        check_axis("pad", a.shape(), axis)?;
        let shape = a.shape().to_vec();
        let (outer, n, inner) = around(&shape, axis);
        let m = n + before + after;
        let mut out = vec![E::zero(); outer * m * inner];
        for o in 0..outer {
            let d = (o * m + before) * inner;
            out[d..d + n * inner].copy_from_slice(&a.value.data()[o * n * inner..(o + 1) * n * inner]);
        }
        let mut oshape = shape.clone();
        oshape[axis] = m;
        Ok(self.record(
            Tensor::from_parts(oshape, out),
            &[a],
            Box::new(move |g, _| {
                let mut d = Vec::with_capacity(numel(&shape));
                for o in 0..outer {
                    let s = (o * m + before) * inner;
                    d.extend_from_slice(&g.data()[s..s + n * inner]);
                }
                Ok(vec![Some(Tensor::from_parts(shape.clone(), d))])
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_slice(shape, v).unwrap()
    }

    #[test]
    fn activations() {
        let tape = Tape::<f64>::new();
        let x = Var::constant(t(&[3], &[-1.0, 0.0, 2.0]));
        assert_eq!(tape.relu(&x).value().data(), &[0.0, 0.0, 2.0]);
        let s = tape.sigmoid(&Var::constant(t(&[1], &[0.0])));
        assert_eq!(s.value().data(), &[0.5]);
    }

    #[test]
    fn pooling_reductions() {
        let tape = Tape::<f64>::new();
        let x = Var::constant(t(&[1, 3], &[1.0, 2.0, 3.0]));
        assert_eq!(tape.mean_axis(&x, 1).unwrap().value().data(), &[2.0]);
        assert_eq!(tape.max_axis(&x, 1).unwrap().value().data(), &[3.0]);
        let c = Var::constant(Tensor::<f64>::full(&[2, 5], 0.7));
        let avg = tape.mean_axis(&c, 1).unwrap();
        let max = tape.max_axis(&c, 1).unwrap();
        for (&a, &m) in avg.value().data().iter().zip(max.value().data()) {
            assert!((a - 0.7).abs() < 1e-15);
            assert_eq!(m, 0.7);
        }
        let empty = Var::constant(Tensor::<f64>::zeros(&[2, 0]));
        assert!(tape.mean_axis(&empty, 1).is_err());
        assert!(tape.max_axis(&empty, 1).is_err());
        assert!(tape.max_axis(&x, 2).is_err());
    }

    #[test]
    fn max_gradient_routes_to_argmax() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2, 3], &[1.0, 5.0, 2.0, 7.0, 0.0, 7.0]));
        let m = tape.max_axis(&x, 1).unwrap();
        let loss = tape.sum(&m);
        let g = tape.backward(&loss).unwrap();
        assert_eq!(g.wrt(&x).data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn broadcast_multiply() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let s = tape.leaf(t(&[2, 1], &[10.0, -1.0]));
        let y = tape.mul_broadcast(&a, &s).unwrap();
        assert_eq!(y.value().data(), &[10.0, 20.0, 30.0, -4.0, -5.0, -6.0]);
        let loss = tape.sum(&y);
        let g = tape.backward(&loss).unwrap();
        assert_eq!(g.wrt(&s).data(), &[6.0, 15.0]);
        assert_eq!(g.wrt(&a).data(), &[10.0, 10.0, 10.0, -1.0, -1.0, -1.0]);

        let tape = Tape::<f64>::new();
        let bad = Var::constant(t(&[3, 1], &[1.0, 1.0, 1.0]));
        assert!(tape.mul_broadcast(&Var::constant(t(&[2, 3], &[0.0; 6])), &bad).is_err());
    }

    #[test]
    fn shape_errors_are_reported() {
        let tape = Tape::<f32>::new();
        let a = Var::constant(Tensor::zeros(&[2, 3]));
        let b = Var::constant(Tensor::zeros(&[3, 2]));
        assert!(tape.add(&a, &b).is_err());
        assert!(tape.mul(&a, &b).is_err());
        assert!(tape.narrow(&a, 1, 2, 2).is_err());
        assert!(tape.permute(&a, &[0, 0]).is_err());
        assert!(tape.concat(&[&a, &b], 1).is_err());
    }

    #[test]
    fn concat_narrow_pad_roundtrip() {
        let tape = Tape::<f64>::new();
        let a = Var::constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = Var::constant(t(&[2, 1], &[9.0, 8.0]));
        let c = tape.concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.value().data(), &[1.0, 2.0, 9.0, 3.0, 4.0, 8.0]);
        assert_eq!(tape.narrow(&c, 1, 2, 1).unwrap().value(), b.value());
        let p = tape.pad(&a, 1, 1, 2).unwrap();
        assert_eq!(p.value().data(), &[0.0, 1.0, 2.0, 0.0, 0.0, 0.0, 3.0, 4.0, 0.0, 0.0]);
    }
}
