use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom, View};
use crate::tensor::{Element, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel running statistics of a batch-norm layer.
#[derive(Clone, Debug)]
pub struct BatchNormStats<E: Element> {
    pub mean: Tensor<E>,
    pub var: Tensor<E>,
}

/// How a batch-norm call normalizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchNormMode {
    /// Batch statistics; returns updated running statistics.
    Train,
    /// Frozen running statistics.
    Eval,
}

fn expect_rank<E: Element>(op: &'static str, v: &Var<E>, rank: usize) -> Result<()> {
    if v.shape().len() != rank {
        return Err(Error::shape(op, format!("expected rank {rank}, got {:?}", v.shape())));
    }
    Ok(())
}

fn expect_bias<E: Element>(op: &'static str, bias: Option<&Var<E>>, len: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.shape() != [len] {
            return Err(Error::shape(op, format!("bias {:?}, expected [{len}]", b.shape())));
        }
    }
    Ok(())
}

fn parents<'a, E: Element>(base: &[&'a Var<E>], bias: Option<&'a Var<E>>) -> Vec<&'a Var<E>> {
    let mut p = base.to_vec();
    p.extend(bias);
    p
}

/// Sums `g: [batch, ch, t]` over batch and time.
fn channel_sums<E: Element>(g: &[E], batch: usize, ch: usize, t: usize) -> Vec<E> {
    let mut s = vec![E::zero(); ch];
    for b in 0..batch {
        for (c, acc) in s.iter_mut().enumerate() {
            let row = &g[(b * ch + c) * t..(b * ch + c + 1) * t];
            *acc += row.iter().copied().sum::<E>();
        }
    }
    s
}

fn with_channel_bias<E: Element>(bias: Option<&Var<E>>, batch: usize, ch: usize, t: usize) -> Vec<E> {
    match bias {
        None => vec![E::zero(); batch * ch * t],
        Some(b) => {
            let mut y = Vec::with_capacity(batch * ch * t);
            for _ in 0..batch {
                for &bc in b.value().data() {
                    y.extend(std::iter::repeat_n(bc, t));
                }
            }
            y
        }
    }
}

/// Output length of a 1-D convolution, or `None` when no window fits.
pub fn conv_out_len(t: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let span = t + 2 * padding;
    (stride > 0 && kernel > 0 && span >= kernel).then(|| (span - kernel) / stride + 1)
}

/// Output length of a 1-D transposed convolution, or `None` when non-positive.
pub fn conv_transpose_out_len(t: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let full = (t.checked_sub(1)?) * stride + kernel;
    full.checked_sub(2 * padding).filter(|&n| n >= 1)
}

impl<E: Element> Tape<E> {
    /// Cross-correlation of `x: [B, Cin, T]` with `w: [Cout, Cin / groups, K]`.
    pub fn conv1d(
        &self,
        x: &Var<E>,
        w: &Var<E>,
        bias: Option<&Var<E>>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Var<E>> {
        expect_rank("conv1d", x, 3)?;
        expect_rank("conv1d", w, 3)?;
        let (batch, cin, t_in) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (cout, cin_g, kw) = (w.shape()[0], w.shape()[1], w.shape()[2]);
        if groups == 0 || cin % groups != 0 || cout % groups != 0 || cin_g * groups != cin {
            return Err(Error::shape(
                "conv1d",
                format!("input {:?} / weight {:?} incompatible with groups={groups}", x.shape(), w.shape()),
            ));
        }
        expect_bias("conv1d", bias, cout)?;
        let t_out = conv_out_len(t_in, kw, stride, padding).ok_or_else(|| {
            Error::shape("conv1d", format!("length {t_in} with kernel {kw}, stride {stride}, padding {padding}"))
        })?;
        let g = ConvGeom { batch, cin, cout, t_in, t_out, kw, stride, pad: padding, groups };
        let mut y = with_channel_bias(bias, batch, cout, t_out);
        kernels::conv_forward(x.value().data(), w.value().data(), &mut y, g);

        let (xv, wv) = (x.value().clone(), w.value().clone());
        Ok(self.record(
            Tensor::from_parts(vec![batch, cout, t_out], y),
            &parents(&[x, w], bias),
            Box::new(move |grad, needs| {
                let gd = grad.data();
                let dx = needs[0].then(|| {
                    let mut dx = vec![E::zero(); xv.numel()];
                    kernels::conv_backward_input(gd, wv.data(), &mut dx, g);
                    Tensor::from_parts(xv.shape().to_vec(), dx)
                });
                let dw = needs[1].then(|| {
                    let mut dw = vec![E::zero(); wv.numel()];
                    kernels::conv_backward_weight(gd, xv.data(), &mut dw, g);
                    Tensor::from_parts(wv.shape().to_vec(), dw)
                });
                let mut out = vec![dx, dw];
                if needs.len() == 3 {
                    out.push(needs[2].then(|| Tensor::from_parts(vec![cout], channel_sums(gd, batch, cout, t_out))));
                }
                Ok(out)
            }),
        ))
    }

    /// Transposed convolution of `x: [B, Cin, T]` with `w: [Cin, Cout, K]`;
    /// the adjoint of [`Tape::conv1d`] for the same weight.
    pub fn conv_transpose1d(
        &self,
        x: &Var<E>,
        w: &Var<E>,
        bias: Option<&Var<E>>,
        stride: usize,
        padding: usize,
    ) -> Result<Var<E>> {
        expect_rank("conv_transpose1d", x, 3)?;
        expect_rank("conv_transpose1d", w, 3)?;
        let (batch, cin, t) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (wcin, cout, kw) = (w.shape()[0], w.shape()[1], w.shape()[2]);
        if wcin != cin || stride == 0 {
            return Err(Error::shape(
                "conv_transpose1d",
                format!("input {:?} vs weight {:?}, stride {stride}", x.shape(), w.shape()),
            ));
        }
        expect_bias("conv_transpose1d", bias, cout)?;
        let t_out = conv_transpose_out_len(t, kw, stride, padding).ok_or_else(|| {
            Error::shape("conv_transpose1d", format!("length {t} with kernel {kw}, stride {stride}, padding {padding}"))
        })?;
        // The equivalent forward convolution maps [B, cout, t_out] -> [B, cin, t].
        let g = ConvGeom {
            batch,
            cin: cout,
            cout: cin,
            t_in: t_out,
            t_out: t,
            kw,
            stride,
            pad: padding,
            groups: 1,
        };
        let mut y = with_channel_bias(bias, batch, cout, t_out);
        kernels::conv_backward_input(x.value().data(), w.value().data(), &mut y, g);

        let (xv, wv) = (x.value().clone(), w.value().clone());
        Ok(self.record(
            Tensor::from_parts(vec![batch, cout, t_out], y),
            &parents(&[x, w], bias),
            Box::new(move |grad, needs| {
                let gd = grad.data();
                let dx = needs[0].then(|| {
                    let mut dx = vec![E::zero(); xv.numel()];
                    kernels::conv_forward(gd, wv.data(), &mut dx, g);
                    Tensor::from_parts(xv.shape().to_vec(), dx)
                });
                let dw = needs[1].then(|| {
                    let mut dw = vec![E::zero(); wv.numel()];
                    kernels::conv_backward_weight(xv.data(), gd, &mut dw, g);
                    Tensor::from_parts(wv.shape().to_vec(), dw)
                });
                let mut out = vec![dx, dw];
                if needs.len() == 3 {
                    out.push(needs[2].then(|| Tensor::from_parts(vec![cout], channel_sums(gd, batch, cout, t_out))));
                }
                Ok(out)
            }),
        ))
    }

    /// `x W + b` over the last axis of `x`, with `w: [Din, Dout]`.
    pub fn linear(&self, x: &Var<E>, w: &Var<E>, bias: Option<&Var<E>>) -> Result<Var<E>> {
        expect_rank("linear", w, 2)?;
        let (din, dout) = (w.shape()[0], w.shape()[1]);
        if x.shape().last() != Some(&din) {
            return Err(Error::shape("linear", format!("input {:?} vs weight {:?}", x.shape(), w.shape())));
        }
        expect_bias("linear", bias, dout)?;
        let rows = x.value().numel() / din.max(1);
        let mut y = match bias {
            Some(b) => b.value().data().repeat(rows),
            None => vec![E::zero(); rows * dout],
        };
        kernels::gemm_acc(
            rows,
            din,
            dout,
            x.value().data(),
            View::new(0, din, 1),
            w.value().data(),
            View::new(0, dout, 1),
            &mut y,
            View::new(0, dout, 1),
        );
        let mut oshape = x.shape().to_vec();
        *oshape.last_mut().expect("rank >= 1") = dout;

        let (xv, wv) = (x.value().clone(), w.value().clone());
        Ok(self.record(
            Tensor::from_parts(oshape, y),
            &parents(&[x, w], bias),
            Box::new(move |grad, needs| {
                let gd = grad.data();
                let dx = needs[0].then(|| {
                    let mut dx = vec![E::zero(); xv.numel()];
                    // g W^T
                    kernels::gemm_acc(rows, dout, din, gd, View::new(0, dout, 1), wv.data(), View::new(0, 1, dout), &mut dx, View::new(0, din, 1));
                    Tensor::from_parts(xv.shape().to_vec(), dx)
                });
                let dw = needs[1].then(|| {
                    let mut dw = vec![E::zero(); din * dout];
                    // x^T g
                    kernels::gemm_acc(din, rows, dout, xv.data(), View::new(0, 1, din), gd, View::new(0, dout, 1), &mut dw, View::new(0, dout, 1));
                    Tensor::from_parts(vec![din, dout], dw)
                });
                let mut out = vec![dx, dw];
                if needs.len() == 3 {
                    out.push(needs[2].then(|| {
                        let mut db = vec![E::zero(); dout];
                        for row in gd.chunks(dout) {
                            for (acc, &v) in db.iter_mut().zip(row) {
                                *acc += v;
                            }
                        }
                        Tensor::from_parts(vec![dout], db)
                    }));
                }
                Ok(out)
            }),
        ))
    }

    /// Batched product over the last two axes, optionally transposing either
    /// operand. Leading axes must match exactly.
    pub fn matmul(&self, a: &Var<E>, ta: bool, b: &Var<E>, tb: bool) -> Result<Var<E>> {
        let (ash, bsh) = (a.shape().to_vec(), b.shape().to_vec());
        if ash.len() < 2 || ash.len() != bsh.len() || ash[..ash.len() - 2] != bsh[..bsh.len() - 2] {
            return Err(Error::shape("matmul", format!("{ash:?} vs {bsh:?}")));
        }
        let r = ash.len();
        let (m, k) = if ta { (ash[r - 1], ash[r - 2]) } else { (ash[r - 2], ash[r - 1]) };
        let (k2, n) = if tb { (bsh[r - 1], bsh[r - 2]) } else { (bsh[r - 2], bsh[r - 1]) };
        if k != k2 {
            return Err(Error::shape("matmul", format!("inner dims {k} vs {k2} ({ash:?} x {bsh:?})")));
        }
        let batch: usize = ash[..r - 2].iter().product();
        let c = kernels::bmm(batch, m, k, n, a.value().data(), ta, b.value().data(), tb);
        let mut oshape = ash[..r - 2].to_vec();
        oshape.extend([m, n]);

        let (av, bv) = (a.value().clone(), b.value().clone());
        Ok(self.record(
            Tensor::from_parts(oshape, c),
            &[a, b],
            Box::new(move |g, needs| {
                let gd = g.data();
                let da = needs[0].then(|| {
                    let d = if ta {
                        kernels::bmm(batch, k, n, m, bv.data(), tb, gd, true)
                    } else {
                        kernels::bmm(batch, m, n, k, gd, false, bv.data(), !tb)
                    };
                    Tensor::from_parts(ash.clone(), d)
                });
                let db = needs[1].then(|| {
                    let d = if tb {
                        kernels::bmm(batch, n, m, k, gd, true, av.data(), ta)
                    } else {
                        kernels::bmm(batch, k, m, n, av.data(), !ta, gd, false)
                    };
                    Tensor::from_parts(bsh.clone(), d)
                });
                Ok(vec![da, db])
            }),
        ))
    }

    /// Softmax along the last axis.
    pub fn softmax(&self, a: &Var<E>) -> Result<Var<E>> {
        let n = *a.shape().last().ok_or_else(|| Error::shape("softmax", "scalar input"))?;
        if n == 0 {
            return Err(Error::shape("softmax", "empty axis"));
        }
        let mut y = a.value().to_vec();
        for row in y.chunks_mut(n) {
            let max = row.iter().fold(E::neg_infinity(), |m, &v| if v > m { v } else { m });
            for v in row.iter_mut() {
                *v = *v - max;
            }
            E::exp_in_place(row);
            let inv = E::one() / row.iter().copied().sum::<E>();
            for v in row.iter_mut() {
                *v *= inv;
            }
        }
        let out = Tensor::from_parts(a.shape().to_vec(), y);
        let yv = out.clone();
        Ok(self.record(
            out,
            &[a],
            Box::new(move |g, _| {
                let mut d = Vec::with_capacity(yv.numel());
                for (yr, gr) in yv.data().chunks(n).zip(g.data().chunks(n)) {
                    let dot: E = yr.iter().zip(gr).map(|(&y, &g)| y * g).sum();
                    d.extend(yr.iter().zip(gr).map(|(&y, &g)| y * (g - dot)));
                }
                Ok(vec![Some(Tensor::from_parts(yv.shape().to_vec(), d))])
            }),
        ))
    }

    /// Batch normalization of `x: [B, C, T]` per channel. In
    /// [`BatchNormMode::Train`] the batch statistics are used and the updated
    /// running statistics are returned alongside the output.
    pub fn batch_norm(
        &self,
        x: &Var<E>,
        gamma: &Var<E>,
        beta: &Var<E>,
        running: &BatchNormStats<E>,
        mode: BatchNormMode,
    ) -> Result<(Var<E>, Option<BatchNormStats<E>>)> {
        expect_rank("batch_norm", x, 3)?;
        let (batch, ch, t) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        for (name, v) in [("gamma", gamma.value()), ("beta", beta.value()), ("running mean", &running.mean), ("running var", &running.var)] {
            if v.shape() != [ch] {
                return Err(Error::shape("batch_norm", format!("{name} {:?} for {ch} channels", v.shape())));
            }
        }
        let count = batch * t;
        if count == 0 {
            return Err(Error::shape("batch_norm", "no elements per channel"));
        }
        let xd = x.value().data();
        let eps = E::lit(BN_EPS);
        let (mean, var) = match mode {
            BatchNormMode::Eval => (running.mean.to_vec(), running.var.to_vec()),
            BatchNormMode::Train => {
                let n = E::lit(count as f64);
                let mean: Vec<E> = channel_sums(xd, batch, ch, t).into_iter().map(|s| s / n).collect();
                let mut var = vec![E::zero(); ch];
                for b in 0..batch {
                    for c in 0..ch {
                        let row = &xd[(b * ch + c) * t..(b * ch + c + 1) * t];
                        var[c] += row.iter().map(|&v| (v - mean[c]) * (v - mean[c])).sum::<E>();
                    }
                }
                (mean, var.into_iter().map(|s| s / n).collect())
            }
        };
        let inv_std: Vec<E> = var.iter().map(|&v| E::one() / (v + eps).sqrt()).collect();
        let (gd, bd) = (gamma.value().data(), beta.value().data());
        let stats = (mode == BatchNormMode::Train).then(|| {
            let m = E::lit(BN_MOMENTUM);
            let unbias = if count > 1 { E::lit(count as f64 / (count - 1) as f64) } else { E::one() };
            BatchNormStats {
                mean: running.mean.zip_map_unchecked(&mean, |r, b| (E::one() - m) * r + m * b),
                var: running.var.zip_map_unchecked(&var, |r, b| (E::one() - m) * r + m * b * unbias),
            }
        });
        if !(x.is_tracked() || gamma.is_tracked() || beta.is_tracked()) {
            // y = x * scale + shift per channel, no saved state
            let mut y = Vec::with_capacity(xd.len());
            for b in 0..batch {
                for c in 0..ch {
                    let scale = gd[c] * inv_std[c];
                    let shift = bd[c] - mean[c] * scale;
                    y.extend(xd[(b * ch + c) * t..(b * ch + c + 1) * t].iter().map(|&v| v * scale + shift));
                }
            }
            return Ok((Var::constant(Tensor::from_parts(x.shape().to_vec(), y)), stats));
        }
        let mut xhat = Vec::with_capacity(xd.len());
        let mut y = Vec::with_capacity(xd.len());
        for b in 0..batch {
            for c in 0..ch {
                for &v in &xd[(b * ch + c) * t..(b * ch + c + 1) * t] {
                    let h = (v - mean[c]) * inv_std[c];
                    xhat.push(h);
                    y.push(gd[c] * h + bd[c]);
                }
            }
        }


        let xhat = Tensor::from_parts(x.shape().to_vec(), xhat);
        let gamma_v = gamma.value().clone();
        let train = mode == BatchNormMode::Train;
        let out = self.record(
            Tensor::from_parts(x.shape().to_vec(), y),
            &[x, gamma, beta],
            Box::new(move |g, needs| {
                let gd = g.data();
                let hd = xhat.data();
                let mut dgamma = vec![E::zero(); ch];
                let dbeta = channel_sums(gd, batch, ch, t);
                for b in 0..batch {
                    for c in 0..ch {
                        let r = (b * ch + c) * t..(b * ch + c + 1) * t;
                        dgamma[c] += gd[r.clone()].iter().zip(&hd[r]).map(|(&g, &h)| g * h).sum::<E>();
                    }
                }
                let dx = needs[0].then(|| {
                    let n = E::lit(count as f64);
                    let gam = gamma_v.data();
                    let mut dx = Vec::with_capacity(gd.len());
                    for b in 0..batch {
                        for c in 0..ch {
                            let scale = gam[c] * inv_std[c];
                            let r = (b * ch + c) * t..(b * ch + c + 1) * t;
                            if train {
                                let (mb, mg) = (dbeta[c] / n, dgamma[c] / n);
                                dx.extend(gd[r.clone()].iter().zip(&hd[r]).map(|(&g, &h)| scale * (g - mb - h * mg)));
                            } else {
                                dx.extend(gd[r].iter().map(|&g| scale * g));
                            }
                        }
                    }
                    Tensor::from_parts(xhat.shape().to_vec(), dx)
                });
                Ok(vec![
                    dx,
                    needs[1].then(|| Tensor::from_parts(vec![ch], dgamma)),
                    needs[2].then(|| Tensor::from_parts(vec![ch], dbeta.clone())),
                ])
            }),
        );
        Ok((out, stats))
    }
}

impl<E: Element> Tensor<E> {
    fn zip_map_unchecked(&self, other: &[E], f: impl Fn(E, E) -> E) -> Tensor<E> {
        Tensor::from_parts(self.shape().to_vec(), self.data().iter().zip(other).map(|(&a, &b)| f(a, b)).collect())
    }
}
