//! Tape-recorded tensor operations and their backward rules.

use super::shape::{
    axis_split, broadcast_shape, broadcast_strides, for_each_broadcast2, gemm, numel, strides_for,
};
use super::{check_finite, Tape, Tensor};
use crate::error::{Error, Result};

const GELU_SCALE: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_CUBIC: f64 = 0.044_715;

fn gelu_value(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_SCALE * (x + GELU_CUBIC * x * x * x)).tanh())
}

fn gelu_derivative(x: f64) -> f64 {
    let u = GELU_SCALE * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_SCALE * (1.0 + 3.0 * GELU_CUBIC * x * x)
}

impl Tape {
    // ── elementwise ─────────────────────────────────────────────────

    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary_op("add", a, b, |x, y| x + y, |g, _, _| g, |g, _, _| g)
    }

    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary_op("sub", a, b, |x, y| x - y, |g, _, _| g, |g, _, _| -g)
    }

    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary_op("mul", a, b, |x, y| x * y, |g, _, y| g * y, |g, x, _| g * x)
    }

    pub fn scale(&self, a: &Tensor, c: f64) -> Result<Tensor> {
        self.unary_op("scale", a, move |x| c * x, move |_| c)
    }

    pub fn gelu(&self, a: &Tensor) -> Result<Tensor> {
        self.unary_op("gelu", a, gelu_value, gelu_derivative)
    }

    pub fn relu(&self, a: &Tensor) -> Result<Tensor> {
        self.unary_op("relu", a, |x| x.max(0.0), |x| if x > 0.0 { 1.0 } else { 0.0 })
    }

    /// |x|, with subgradient 0 at 0.
    pub fn abs(&self, a: &Tensor) -> Result<Tensor> {
        self.unary_op(
            "abs",
            a,
            f64::abs,
            |x| {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            },
        )
    }

    fn unary_op(
        &self,
        name: &'static str,
        a: &Tensor,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64) -> f64 + 'static,
    ) -> Result<Tensor> {
        let data: Vec<f64> = a.data().iter().map(|&x| f(x)).collect();
        check_finite(name, &data)?;
        let rg = self.wants_grad(&[a]);
        let out = Tensor::from_op(a.shape().to_vec(), data, rg);
        if rg {
            let (a, out_h) = (a.clone(), out.clone());
            self.record(name, move || {
                let gout = out_h.grad_ref();
                let Some(g) = gout.as_ref() else { return };
                if a.requires_grad() {
                    let av = a.data();
                    a.with_grad_buf(|ga| {
                        for i in 0..ga.len() {
                            ga[i] += g[i] * df(av[i]);
                        }
                    });
                }
            });
        }
        Ok(out)
    }

    fn binary_op(
        &self,
        name: &'static str,
        a: &Tensor,
        b: &Tensor,
        f: impl Fn(f64, f64) -> f64,
        dfa: impl Fn(f64, f64, f64) -> f64 + 'static,
        dfb: impl Fn(f64, f64, f64) -> f64 + 'static,
    ) -> Result<Tensor> {
        let out_shape = broadcast_shape(name, a.shape(), b.shape())?;
        let rank = out_shape.len();
        // layout classes that avoid the generic multi-index walk: identical
        // shapes, and operands that are an exact trailing block of the output
        let equal = a.shape() == b.shape();
        let b_suffix = !equal && out_shape == a.shape() && out_shape.ends_with(b.shape());
        let a_suffix = !equal && !b_suffix && out_shape == b.shape() && out_shape.ends_with(a.shape());
        let sa = broadcast_strides(a.shape(), rank);
        let sb = broadcast_strides(b.shape(), rank);
        let mut data = vec![0.0; numel(&out_shape)];
        {
            let (av, bv) = (a.data(), b.data());
            if equal {
                for (o, d) in data.iter_mut().enumerate() {
                    *d = f(av[o], bv[o]);
                }
            } else if b_suffix {
                let nb = bv.len().max(1);
                for (chunk, d) in data.chunks_mut(nb).enumerate() {
                    let base = chunk * nb;
                    for (j, slot) in d.iter_mut().enumerate() {
                        *slot = f(av[base + j], bv[j]);
                    }
                }
            } else if a_suffix {
                let na = av.len().max(1);
                for (chunk, d) in data.chunks_mut(na).enumerate() {
                    let base = chunk * na;
                    for (j, slot) in d.iter_mut().enumerate() {
                        *slot = f(av[j], bv[base + j]);
                    }
                }
            } else {
                for_each_broadcast2(&out_shape, &sa, &sb, |o, ia, ib| {
                    data[o] = f(av[ia], bv[ib]);
                });
            }
        }
        check_finite(name, &data)?;
        let rg = self.wants_grad(&[a, b]);
        let out = Tensor::from_op(out_shape.clone(), data, rg);
        if rg {
            let (a, b, out_h) = (a.clone(), b.clone(), out.clone());
            self.record(name, move || {
                let gout = out_h.grad_ref();
                let Some(g) = gout.as_ref() else { return };
                let (av, bv) = (a.data(), b.data());
                if a.requires_grad() {
                    a.with_grad_buf(|ga| {
                        if equal || b_suffix {
                            let nb = bv.len().max(1);
                            for (o, gi) in g.iter().enumerate() {
                                ga[o] += dfa(*gi, av[o], bv[if equal { o } else { o % nb }]);
                            }
                        } else if a_suffix {
                            let na = av.len().max(1);
                            for (o, gi) in g.iter().enumerate() {
                                ga[o % na] += dfa(*gi, av[o % na], bv[o]);
                            }
                        } else {
                            for_each_broadcast2(&out_shape, &sa, &sb, |o, ia, ib| {
                                ga[ia] += dfa(g[o], av[ia], bv[ib]);
                            });
                        }
                    });
                }
                if b.requires_grad() {
                    b.with_grad_buf(|gb| {
                        if equal || a_suffix {
                            let na = av.len().max(1);
                            for (o, gi) in g.iter().enumerate() {
                                gb[o] += dfb(*gi, av[if equal { o } else { o % na }], bv[o]);
                            }
                        } else if b_suffix {
                            let nb = bv.len().max(1);
                            for (o, gi) in g.iter().enumerate() {
                                gb[o % nb] += dfb(*gi, av[o], bv[o % nb]);
                            }
                        } else {
                            for_each_broadcast2(&out_shape, &sa, &sb, |o, ia, ib| {
                                gb[ib] += dfb(g[o], av[ia], bv[ib]);
                            });
                        }
                    });
                }
            });
        }
        Ok(out)
    }

    // ── matmul ──────────────────────────────────────────────────────

    /// Batched matrix product `[..., m, k] x [..., k, n] -> [..., m, n]`;
    /// leading batch extents broadcast.
    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        };
        let (ra, rb) = (a.rank(), b.rank());
        if ra < 2 || rb < 2 {
            return Err(mismatch());
        }
        let (m, k) = (a.shape()[ra - 2], a.shape()[ra - 1]);
        let (kb, n) = (b.shape()[rb - 2], b.shape()[rb - 1]);
        if k != kb {
            return Err(mismatch());
        }
        let batch_a = &a.shape()[..ra - 2];
        let batch_b = &b.shape()[..rb - 2];
        let batch = broadcast_shape("matmul", batch_a, batch_b).map_err(|_| mismatch())?;
        let bc_rank = batch.len();
        // strides in elements; batch "units" of one matrix each
        let sa: Vec<usize> = broadcast_strides(batch_a, bc_rank)
            .iter()
            .map(|s| s * m * k)
            .collect();
        let sb: Vec<usize> = broadcast_strides(batch_b, bc_rank)
            .iter()
            .map(|s| s * k * n)
            .collect();

        let mut out_shape = batch.clone();
        out_shape.extend_from_slice(&[m, n]);
        let mut data = vec![0.0; numel(&out_shape)];
        {
            let (av, bv) = (a.data(), b.data());
            for_each_broadcast2(&batch, &sa, &sb, |o, ia, ib| {
                gemm(
                    m,
                    k,
                    n,
                    1.0,
                    &av[ia..],
                    k,
                    1,
                    &bv[ib..],
                    n,
                    1,
                    0.0,
                    &mut data[o * m * n..],
                    n,
                    1,
                );
            });
        }
        check_finite("matmul", &data)?;
        let rg = self.wants_grad(&[a, b]);
        let out = Tensor::from_op(out_shape, data, rg);
        if rg {
            let (a, b, out_h) = (a.clone(), b.clone(), out.clone());
            self.record("matmul", move || {
                let gout = out_h.grad_ref();
                let Some(g) = gout.as_ref() else { return };
                if a.requires_grad() {
                    let bv = b.data();
                    a.with_grad_buf(|ga| {
                        for_each_broadcast2(&batch, &sa, &sb, |o, ia, ib| {
                            // dA = dC * B^T
                            gemm(
                                m,
                                n,
                                k,
                                1.0,
                                &g[o * m * n..],
                                n,
                                1,
                                &bv[ib..],
                                1,
                                n,
                                1.0,
                                &mut ga[ia..],
                                k,
                                1,
                            );
                        });
                    });
                }
                if b.requires_grad() {
                    let av = a.data();
                    b.with_grad_buf(|gb| {
                        for_each_broadcast2(&batch, &sa, &sb, |o, ia, ib| {
                            // dB = A^T * dC
                            gemm(
                                k,
                                m,
                                n,
                                1.0,
                                &av[ia..],
                                1,
                                k,
                                &g[o * m * n..],
                                n,
                                1,
                                1.0,
                                &mut gb[ib..],
                                n,
                                1,
                            );
                        });
                    });
                }
            });
        }
        Ok(out)
    }

    /// x @ w + bias; `w` is `[k, n]`, `bias` is `[n]`.
    pub fn linear(&self, x: &Tensor, w: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let y = self.matmul(x, w)?;
        self.add(&y, bias)
    }

    // ── softmax / layer norm ────────────────────────────────────────

    /// Max-stabilized softmax along `axis`. `-inf` entries get exactly zero
    /// weight; a slice of only `-inf` is an error.
    pub fn softmax(&self, t: &Tensor, axis: usize) -> Result<Tensor> {
        if axis >= t.rank() {
            return Err(Error::AxisOutOfRange {
                op: "softmax",
                axis,
                rank: t.rank(),
            });
        }
        let (outer, n, inner) = axis_split(t.shape(), axis);
        let tv = t.data();
        let mut data = vec![0.0; tv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let mut max = f64::NEG_INFINITY;
                for j in 0..n {
                    max = max.max(tv[base + j * inner]);
                }
                if max == f64::NEG_INFINITY {
                    return Err(Error::FullyMaskedSlice);
                }
                let mut sum = 0.0;
                for j in 0..n {
                    let e = (tv[base + j * inner] - max).exp();
                    data[base + j * inner] = e;
                    sum += e;
                }
                for j in 0..n {
                    data[base + j * inner] /= sum;
                }
            }
        }
        check_finite("softmax", &data)?;
        let rg = self.wants_grad(&[t]);
        let out = Tensor::from_op(t.shape().to_vec(), data, rg);
        if rg {
            let (t, out_h) = (t.clone(), out.clone());
            self.record("softmax", move || {
                let gout = out_h.grad_ref();
                let Some(g) = gout.as_ref() else { return };
                if !t.requires_grad() {
                    return;
                }
                let y = out_h.data();
                t.with_grad_buf(|gt| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * n * inner + i;
                            let mut dot = 0.0;
                            for j in 0..n {
                                let idx = base + j * inner;
                                dot += g[idx] * y[idx];
                            }
                            for j in 0..n {
                                let idx = base + j * inner;
                                gt[idx] += y[idx] * (g[idx] - dot);
                            }
                        }
                    }
                });
            });
        }
        Ok(out)
    }

    /// Normalizes over the last (channel) axis, then applies the affine
    /// `gain`/`bias`. Epsilon sits under the square root.
    pub fn layer_norm(
        &self,
        x: &Tensor,
        gain: &Tensor,
        bias: &Tensor,
        eps: f64,
    ) -> Result<Tensor> {
        let rank = x.rank();
        let c = if rank == 0 { 1 } else { x.shape()[rank - 1] };
        if c == 0 {
            return Err(Error::invalid("layer_norm: channel extent 0"));
        }
        if gain.shape() != [c] || bias.shape() != [c] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: gain.shape().to_vec(),
                rhs: vec![c],
            });
        }
        let rows = x.numel() / c;
        let xv = x.data();
        let (gv, bv) = (gain.data(), bias.data());
        let mut data = vec![0.0; xv.len()];
        let mut means = vec![0.0; rows];
        let mut rstds = vec![0.0; rows];
        for r in 0..rows {
            let row = &xv[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            means[r] = mean;
            rstds[r] = rstd;
            for j in 0..c {
                data[r * c + j] = (row[j] - mean) * rstd * gv[j] + bv[j];
            }
        }
        check_finite("layer_norm", &data)?;
        let rg = self.wants_grad(&[x, gain, bias]);
        let out = Tensor::from_op(x.shape().to_vec(), data, rg);
        if rg {
            let (x, gain, bias, out_h) = (x.clone(), gain.clone(), bias.clone(), out.clone());
            self.record("layer_norm", move || {
                let gout = out_h.grad_ref();
                let Some(g) = gout.as_ref() else { return };
                let xv = x.data();
                let gv = gain.data();
                let xhat = |r: usize, j: usize| (xv[r * c + j] - means[r]) * rstds[r];
                if bias.requires_grad() {
                    bias.with_grad_buf(|gb| {
                        for r in 0..rows {
                            for j in 0..c {
                                gb[j] += g[r * c + j];
                            }
                        }
                    });
                }
                if gain.requires_grad() {
                    gain.with_grad_buf(|gg| {
                        for r in 0..rows {
                            for j in 0..c {
                                gg[j] += g[r * c + j] * xhat(r, j);
                            }
                        }
                    });
                }
                if x.requires_grad() {
                    x.with_grad_buf(|gx| {
                        for r in 0..rows {
                            let mut m1 = 0.0;
                            let mut m2 = 0.0;
                            for j in 0..c {
                                let dxh = g[r * c + j] * gv[j];
                                m1 += dxh;
                                m2 += dxh * xhat(r, j);
                            }
                            m1 /= c as f64;
                            m2 /= c as f64;
                            for j in 0..c {
                                let dxh = g[r * c + j] * gv[j];
                                gx[r * c + j] += rstds[r] * (dxh - m1 - xhat(r, j) * m2);
                            }
                        }
                    });
                }
            });
        }
        Ok(out)
    }

    // ── layout ──────────────────────────────────────────────────────

    /// Concatenation along `axis`; all other extents must match.
    pub fn concat(&self, parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::invalid("concat: no inputs"));
        }
        let rank = parts[0].rank();
        if axis >= rank {
            return Err(Error::AxisOutOfRange {
                op: "concat",
                axis,
                rank,
            });
        }
        let mut axis_total = 0;
        for p in parts {
            if p.rank() != rank {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: parts[0].shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            for d in 0..rank {
                if d != axis && p.shape()[d] != parts[0].shape()[d] {
                    return Err(Error::ShapeMismatch {
                        op: "concat",
                        lhs: parts[0].shape().to_vec(),
                        rhs: p.shape().to_vec(),
                    });
                }
            }
            axis_total += p.shape()[axis];
        }
        let mut out_shape = parts[0].shape().to_vec();
        out_shape[axis] = axis_total;
        let (outer, _, inner) = axis_split(&out_shape, axis);
        let mut data = vec![0.0; numel(&out_shape)];
        let mut offset = 0; // running offset along the axis
        for p in parts {
            let np = p.shape()[axis];
            let pv = p.data();
            for o in 0..outer {
                let src = &pv[o * np * inner..(o + 1) * np * inner];
                let dst_base = o * axis_total * inner + offset * inner;
                data[dst_base..dst_base + np * inner].copy_from_slice(src);
            }
            offset += np;
        }
        let inputs: Vec<&Tensor> = parts.to_vec();
        let rg = self.wants_grad(&inputs);
        let out = Tensor::from_op(out_shape, data, rg);
        if rg {
            let owned: Vec<Tensor> = parts.iter().map(|p| (*p).clone()).collect();
            let out_h = out.clone();
            self.record("concat", move || {
                let gout = out_h.grad_ref();
                let Some(g) = gout.as_ref() else { return };
                let mut offset = 0;
                for p in &owned {
                    let np = p.shape()[axis];
                    if p.requires_grad() {
                        p.with_grad_buf(|gp| {
                            for o in 0..outer {
                                let src_base = o * axis_total * inner + offset * inner;
                                let dst = &mut gp[o * np * inner..(o + 1) * np * inner];
                                for (d, s) in dst.iter_mut().zip(&g[src_base..src_base + np * inner])
                                {
                                    *d += *s;
                                }
                            }
                        });
                    }
                    offset += np;
                }
            });
        }
        Ok(out)
    }

    /// Splits along `axis` into pieces of the given sizes; exact inverse of
    /// [`Tape::concat`].
    pub fn split(&self, t: &Tensor, sizes: &[usize], axis: usize) -> Result<Vec<Tensor>> {
        if axis >= t.rank() {
            return Err(Error::AxisOutOfRange {
                op: "split",
                axis,
                rank: t.rank(),
            });
        }
        let total: usize = sizes.iter().sum();
        if total != t.shape()[axis] {
            return Err(Error::invalid(format!(
                "split: sizes {:?} sum to {}, axis extent is {}",
                sizes,
                total,
                t.shape()[axis]
            )));
        }
        let (outer, n, inner) = axis_split(t.shape(), axis);
        let tv = t.data();
        let rg = self.wants_grad(&[t]);
        let mut outs = Vec::with_capacity(sizes.len());
        let mut offset = 0;
        for &sz in sizes {
            let mut piece_shape = t.shape().to_vec();
            piece_shape[axis] = sz;
            let mut data = vec![0.0; outer * sz * inner];
            for o in 0..outer {
                let src_base = o * n * inner + offset * inner;
                data[o * sz * inner..(o + 1) * sz * inner]
                    .copy_from_slice(&tv[src_base..src_base + sz * inner]);
            }
            outs.push(Tensor::from_op(piece_shape, data, rg));
            offset += sz;
        }
        if rg {
            let t = t.clone();
            let pieces = outs.clone();
            let sizes = sizes.to_vec();
            self.record("split", move || {
                if !t.requires_grad() {
                    return;
                }
                t.with_grad_buf(|gt| {
                    let mut offset = 0;
                    for (piece, &sz) in pieces.iter().zip(&sizes) {
                        let gp = piece.grad_ref();
                        if let Some(g) = gp.as_ref() {
                            for o in 0..outer {
                                let dst_base = o * n * inner + offset * inner;
                                for j in 0..sz * inner {
                                    gt[dst_base + j] += g[o * sz * inner + j];
                                }
                            }
                        }
                        offset += sz;
                    }
                });
            });
        }
        Ok(outs)
    }

    pub fn reshape(&self, t: &Tensor, new_shape: &[usize]) -> Result<Tensor> {
        if numel(new_shape) != t.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: t.shape().to_vec(),
                rhs: new_shape.to_vec(),
            });
        }
        let rg = self.wants_grad(&[t]);
        let out = Tensor::from_op(new_shape.to_vec(), t.data().to_vec(), rg);
        if rg {
            let (t, out_h) = (t.clone(), out.clone());
            self.record("reshape", move || {
                let gout = out_h.grad_ref();
                let Some(g) = gout.as_ref() else { return };
                if t.requires_grad() {
                    t.accumulate_grad(g);
                }
            });
        }
        Ok(out)
    }

    /// Reorders axes: `out.shape[i] = t.shape[axes[i]]`.
    pub fn permute(&self, t: &Tensor, axes: &[usize]) -> Result<Tensor> {
        let rank = t.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::invalid(format!(
                "permute: {:?} is not a permutation of 0..{}",
                axes, rank
            )));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| t.shape()[a]).collect();
        let in_strides = strides_for(t.shape());
        let mapped: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let zeros = vec![0usize; rank];
        let tv = t.data();
        let mut data = vec![0.0; t.numel()];
        for_each_broadcast2(&out_shape, &mapped, &zeros, |o, i, _| data[o] = tv[i]);
        let rg = self.wants_grad(&[t]);
        let out = Tensor::from_op(out_shape.clone(), data, rg);
        if rg {
            let (t, out_h) = (t.clone(), out.clone());
            self.record("permute", move || {
                let gout = out_h.grad_ref();
                let Some(g) = gout.as_ref() else { return };
                if t.requires_grad() {
                    t.with_grad_buf(|gt| {
                        for_each_broadcast2(&out_shape, &mapped, &zeros, |o, i, _| gt[i] += g[o]);
                    });
                }
            });
        }
        Ok(out)
    }

    /// Broadcasts `t` up to `target` (right-aligned); backward sums the
    /// expanded positions back.
    pub fn expand(&self, t: &Tensor, target: &[usize]) -> Result<Tensor> {
        let bshape = broadcast_shape("expand", t.shape(), target)?;
        if bshape != target {
            return Err(Error::ShapeMismatch {
                op: "expand",
                lhs: t.shape().to_vec(),
                rhs: target.to_vec(),
            });
        }
        let rank = target.len();
        let st = broadcast_strides(t.shape(), rank);
        let zeros = vec![0usize; rank];
        let tv = t.data();
        let mut data = vec![0.0; numel(target)];
        for_each_broadcast2(target, &st, &zeros, |o, i, _| data[o] = tv[i]);
        let rg = self.wants_grad(&[t]);
        let out = Tensor::from_op(target.to_vec(), data, rg);
        if rg {
            let (t, out_h) = (t.clone(), out.clone());
            let target = target.to_vec();
            self.record("expand", move || {
                let gout = out_h.grad_ref();
                let Some(g) = gout.as_ref() else { return };
                if t.requires_grad() {
                    t.with_grad_buf(|gt| {
                        for_each_broadcast2(&target, &st, &zeros, |o, i, _| gt[i] += g[o]);
                    });
                }
            });
        }
        Ok(out)
    }

    // ── reductions ──────────────────────────────────────────────────

    pub fn sum_all(&self, t: &Tensor) -> Result<Tensor> {
        let s: f64 = t.data().iter().sum();
        check_finite("sum", &[s])?;
        let rg = self.wants_grad(&[t]);
        let out = Tensor::from_op(vec![], vec![s], rg);
        if rg {
            let (t, out_h) = (t.clone(), out.clone());
            self.record("sum", move || {
                let gout = out_h.grad_ref();
                let Some(g) = gout.as_ref() else { return };
                if t.requires_grad() {
                    t.with_grad_buf(|gt| {
                        for v in gt.iter_mut() {
                            *v += g[0];
                        }
                    });
                }
            });
        }
        Ok(out)
    }

    pub fn mean_all(&self, t: &Tensor) -> Result<Tensor> {
        if t.numel() == 0 {
            return Err(Error::invalid("mean of empty tensor"));
        }
        let s = self.sum_all(t)?;
        self.scale(&s, 1.0 / t.numel() as f64)
    }
}

impl Tensor {
    pub(crate) fn grad_ref(&self) -> std::cell::Ref<'_, Option<Vec<f64>>> {
        self.inner.grad.borrow()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_check;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{x} vs {y} (tol {tol})");
        }
    }

    #[test]
    fn matmul_identity() {
        let tape = Tape::new();
        let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let b = t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]);
        let y = tape.matmul(&eye, &b).unwrap();
        assert_eq!(y.data(), &[3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn matmul_row_times_column() {
        let tape = Tape::new();
        let a = t(&[1, 2], &[1.0, 2.0]);
        let b = t(&[2, 1], &[3.0, 4.0]);
        let y = tape.matmul(&a, &b).unwrap();
        assert_eq!(y.shape(), &[1, 1]);
        assert_eq!(y.data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let tape = Tape::new();
        let a = t(&[2, 3], &[0.0; 6]);
        let b = t(&[2, 2], &[0.0; 4]);
        match tape.matmul(&a, &b) {
            Err(Error::ShapeMismatch { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 2]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn matmul_gradient_of_sum_is_ones_times_b_transpose() {
        // d/dA sum(A*B) = ones(m,n) * B^T, cross-checked by finite differences
        let a = t(&[2, 3], &[0.3, -1.2, 0.7, 0.1, 0.9, -0.4]).with_grad();
        let b = t(&[3, 2], &[1.0, 2.0, -0.5, 0.25, 3.0, -1.0]);
        let tape = Tape::new();
        let y = tape.matmul(&a, &b).unwrap();
        let loss = tape.sum_all(&y).unwrap();
        tape.backward(&loss).unwrap();
        // ones(2,2) * B^T
        let expected = [3.0, -0.25, 2.0, 3.0, -0.25, 2.0];
        assert_close(&a.grad().unwrap(), &expected, 1e-12);

        let max_err = finite_diff_check(&[a.clone()], |tape, params| {
            let y = tape.matmul(&params[0], &b)?;
            tape.sum_all(&y)
        })
        .unwrap();
        assert!(max_err < 1e-6, "relative error {max_err}");
    }

    #[test]
    fn matmul_broadcasts_batch_dims() {
        let tape = Tape::new();
        // (2,2,2) x (2,2) shared weight
        let a = t(&[2, 2, 2], &[1.0, 0.0, 0.0, 1.0, 2.0, 0.0, 0.0, 2.0]).with_grad();
        let w = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).with_grad();
        let y = tape.matmul(&a, &w).unwrap();
        assert_eq!(y.shape(), &[2, 2, 2]);
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0, 2.0, 4.0, 6.0, 8.0]);
        let loss = tape.sum_all(&y).unwrap();
        tape.backward(&loss).unwrap();
        // shared weight accumulates over both batch slices
        assert_eq!(w.grad().unwrap(), vec![3.0, 3.0, 3.0, 3.0]);
    }

    #[test]
    fn elementwise_identities() {
        let tape = Tape::new();
        let y = tape.add(&t(&[2], &[1.0, 2.0]), &t(&[2], &[0.0, 0.0])).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0]);
        let z = tape.mul(&t(&[2], &[2.0, 3.0]), &t(&[2], &[4.0, 5.0])).unwrap();
        assert_eq!(z.data(), &[8.0, 15.0]);
        let g = tape.gelu(&t(&[1], &[0.0])).unwrap();
        assert_eq!(g.data(), &[0.0]);
    }

    #[test]
    fn broadcast_add_reduces_gradient() {
        let tape = Tape::new();
        let x = t(&[2, 3], &[1.0; 6]);
        let bias = t(&[3], &[0.5, -0.5, 0.0]).with_grad();
        let y = tape.add(&x, &bias).unwrap();
        assert_eq!(y.shape(), &[2, 3]);
        let loss = tape.sum_all(&y).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(bias.grad().unwrap(), vec![2.0, 2.0, 2.0]);
    }

    #[test]
    fn non_broadcastable_shapes_error() {
        let tape = Tape::new();
        let a = t(&[2, 3], &[0.0; 6]);
        let b = t(&[2, 2], &[0.0; 4]);
        assert!(matches!(
            tape.add(&a, &b),
            Err(Error::ShapeMismatch { op: "add", .. })
        ));
    }

    #[test]
    fn concat_and_split_examples() {
        let tape = Tape::new();
        let a = t(&[2, 1], &[1.0, 2.0]);
        let b = t(&[2, 1], &[3.0, 4.0]);
        let y = tape.concat(&[&a, &b], 1).unwrap();
        assert_eq!(y.shape(), &[2, 2]);
        assert_eq!(y.data(), &[1.0, 3.0, 2.0, 4.0]);

        let x = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let parts = tape.split(&x, &[2, 1], 1).unwrap();
        assert_eq!(parts[0].shape(), &[2, 2]);
        assert_eq!(parts[1].shape(), &[2, 1]);
        assert_eq!(parts[0].data(), &[1.0, 2.0, 4.0, 5.0]);
        assert_eq!(parts[1].data(), &[3.0, 6.0]);
    }

    #[test]
    fn split_concat_roundtrip_is_bitwise() {
        let tape = Tape::new();
        let x = t(&[3, 4], &[0.1, -0.2, 0.3, 1e-17, 5.0, -6.0, 7.5, 0.0, 1.0, 2.0, 3.0, 4.0]);
        let parts = tape.split(&x, &[1, 3], 1).unwrap();
        let refs: Vec<&Tensor> = parts.iter().collect();
        let back = tape.concat(&refs, 1).unwrap();
        assert_eq!(back.data(), x.data());
    }

    #[test]
    fn split_routes_gradient_slices() {
        let tape = Tape::new();
        let x = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).with_grad();
        let parts = tape.split(&x, &[1, 1], 1).unwrap();
        // only use the second slice in the loss
        let loss = tape.sum_all(&parts[1]).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn softmax_examples() {
        let tape = Tape::new();
        let y = tape.softmax(&t(&[2], &[0.0, 0.0]), 0).unwrap();
        assert_close(y.data(), &[0.5, 0.5], 1e-15);

        let m = tape
            .softmax(&t(&[2], &[0.0, f64::NEG_INFINITY]), 0)
            .unwrap();
        assert_eq!(m.data(), &[1.0, 0.0]);

        let big = tape.softmax(&t(&[2], &[1000.0, 1000.0]), 0).unwrap();
        assert_close(big.data(), &[0.5, 0.5], 1e-15);

        assert!(matches!(
            tape.softmax(&t(&[2], &[f64::NEG_INFINITY, f64::NEG_INFINITY]), 0),
            Err(Error::FullyMaskedSlice)
        ));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let tape = Tape::new();
        let x = t(&[3, 4], &[0.3, -2.0, 5.0, 0.0, 1.0, 1.0, 1.0, 1.0, -9.0, 3.0, 0.5, 2.0]);
        let y = tape.softmax(&x, 1).unwrap();
        for r in 0..3 {
            let s: f64 = y.data()[r * 4..(r + 1) * 4].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(y.data()[r * 4..(r + 1) * 4].iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn layer_norm_examples() {
        let tape = Tape::new();
        let gain = Tensor::ones(&[3]);
        let bias = Tensor::zeros(&[3]);
        let y = tape
            .layer_norm(&t(&[1, 3], &[5.0, 5.0, 5.0]), &gain, &bias, 1e-5)
            .unwrap();
        assert_close(y.data(), &[0.0, 0.0, 0.0], 1e-12);

        let g2 = Tensor::ones(&[2]);
        let b2 = Tensor::zeros(&[2]);
        let z = tape.layer_norm(&t(&[1, 2], &[1.0, -1.0]), &g2, &b2, 1e-5).unwrap();
        let expected = 1.0 / (1.0 + 1e-5_f64).sqrt();
        assert_close(z.data(), &[expected, -expected], 1e-15);

        let empty = Tensor::from_vec(vec![2, 0], vec![]).unwrap();
        let g0 = Tensor::ones(&[0]);
        assert!(tape.layer_norm(&empty, &g0, &g0, 1e-5).is_err());
    }

    #[test]
    fn layer_norm_gradient_matches_finite_differences() {
        let x = t(&[2, 4], &[0.3, -1.0, 2.0, 0.7, -0.2, 0.9, 1.5, -2.2]).with_grad();
        let gain = t(&[4], &[1.1, 0.9, 1.0, 1.3]).with_grad();
        let bias = t(&[4], &[0.1, -0.1, 0.0, 0.2]).with_grad();
        let max_err = finite_diff_check(&[x, gain, bias], |tape, p| {
            let y = tape.layer_norm(&p[0], &p[1], &p[2], 1e-5)?;
            let sq = tape.mul(&y, &y)?;
            tape.sum_all(&sq)
        })
        .unwrap();
        assert!(max_err < 1e-6, "relative error {max_err}");
    }

    #[test]
    fn backward_examples() {
        // loss = sum(x) => grad ones
        let tape = Tape::new();
        let x = t(&[3], &[4.0, 5.0, 6.0]).with_grad();
        let loss = tape.sum_all(&x).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0]);

        // loss = sum(x*x), x=[1,2] => grad [2,4]
        let tape = Tape::new();
        let x = t(&[2], &[1.0, 2.0]).with_grad();
        let y = tape.mul(&x, &x).unwrap();
        let loss = tape.sum_all(&y).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn mlp_composite_gradient_check() {
        // two-layer MLP with GELU, checked against central differences
        let w1 = t(&[3, 4], &[0.2, -0.4, 0.7, 0.1, 0.5, 0.3, -0.2, 0.8, -0.6, 0.9, 0.4, -0.3])
            .with_grad();
        let b1 = t(&[4], &[0.05, -0.02, 0.1, 0.0]).with_grad();
        let w2 = t(&[4, 1], &[0.7, -0.5, 0.3, 0.2]).with_grad();
        let b2 = t(&[1], &[0.1]).with_grad();
        let x = t(&[2, 3], &[1.0, -0.5, 0.25, 0.4, 0.9, -1.2]);
        let max_err = finite_diff_check(&[w1, b1, w2, b2], |tape, p| {
            let h = tape.linear(&x, &p[0], &p[1])?;
            let h = tape.gelu(&h)?;
            let y = tape.linear(&h, &p[2], &p[3])?;
            let sq = tape.mul(&y, &y)?;
            tape.sum_all(&sq)
        })
        .unwrap();
        assert!(max_err < 1e-4, "relative error {max_err}");
    }

    #[test]
    fn permute_and_expand_roundtrip_gradients() {
        let tape = Tape::new();
        let x = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).with_grad();
        let y = tape.permute(&x, &[1, 0]).unwrap();
        assert_eq!(y.shape(), &[3, 2]);
        assert_eq!(y.data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let e = tape.expand(&y, &[2, 3, 2]).unwrap();
        let loss = tape.sum_all(&e).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0; 6]);
    }

    #[test]
    fn nan_output_is_an_error() {
        let tape = Tape::new();
        let inf = t(&[1], &[f64::INFINITY]);
        let zero = t(&[1], &[0.0]);
        assert!(matches!(
            tape.mul(&inf, &zero),
            Err(Error::NonFinite(_))
        ));
    }
}
