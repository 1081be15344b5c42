//! Elementwise, linear-algebra, shape, and reduction ops.
//!
//! Every op validates shapes, computes the forward value, and registers a
//! backward rule on the output. Reductions produce `[1]`-shaped scalars.

use rayon::prelude::*;

use super::{Element, Tensor};
use crate::error::{Error, Result};

pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn same_shape<T: Element>(a: &Tensor<T>, b: &Tensor<T>, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

// Work threshold below which matmul stays single-threaded.
const PAR_FLOPS: usize = 1 << 20;

pub(crate) fn matmul_raw<T: Element>(
    a: &[T],
    b: &[T],
    m: usize,
    k: usize,
    n: usize,
    out: &mut [T],
) {
    debug_assert_eq!(out.len(), m * n);
    let body = |row: usize, out_row: &mut [T]| {
        let a_row = &a[row * k..(row + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == T::ZERO {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    };
    if m * k * n >= PAR_FLOPS && m > 1 {
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(row, out_row)| body(row, out_row));
    } else {
        for (row, out_row) in out.chunks_mut(n).enumerate() {
            body(row, out_row);
        }
    }
}

impl<T: Element> Tensor<T> {
    pub fn add(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape(self, rhs, "add")?;
        let data = self.with_data(|a| {
            rhs.with_data(|b| a.iter().zip(b).map(|(&x, &y)| x + y).collect::<Vec<_>>())
        });
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), rhs.clone()],
            Box::new(|g, parents| {
                parents[0].accum_grad(g);
                parents[1].accum_grad(g);
            }),
        ))
    }

    pub fn sub(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape(self, rhs, "sub")?;
        let data = self.with_data(|a| {
            rhs.with_data(|b| a.iter().zip(b).map(|(&x, &y)| x - y).collect::<Vec<_>>())
        });
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), rhs.clone()],
            Box::new(|g, parents| {
                parents[0].accum_grad(g);
                parents[1].accum_grad_owned(g.iter().map(|&v| -v).collect());
            }),
        ))
    }

    /// Hadamard (elementwise) product.
    pub fn mul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape(self, rhs, "mul")?;
        let data = self.with_data(|a| {
            rhs.with_data(|b| a.iter().zip(b).map(|(&x, &y)| x * y).collect::<Vec<_>>())
        });
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), rhs.clone()],
            Box::new(|g, parents| {
                let da = parents[1].with_data(|b| {
                    g.iter().zip(b).map(|(&gv, &bv)| gv * bv).collect::<Vec<_>>()
                });
                parents[0].accum_grad_owned(da);
                let db = parents[0].with_data(|a| {
                    g.iter().zip(a).map(|(&gv, &av)| gv * av).collect::<Vec<_>>()
                });
                parents[1].accum_grad_owned(db);
            }),
        ))
    }

    /// Elementwise division.
    pub fn div(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape(self, rhs, "div")?;
        let data = self.with_data(|a| {
            rhs.with_data(|b| a.iter().zip(b).map(|(&x, &y)| x / y).collect::<Vec<_>>())
        });
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), rhs.clone()],
            Box::new(|g, parents| {
                let da = parents[1].with_data(|b| {
                    g.iter().zip(b).map(|(&gv, &bv)| gv / bv).collect::<Vec<_>>()
                });
                parents[0].accum_grad_owned(da);
                let db = parents[0].with_data(|a| {
                    parents[1].with_data(|b| {
                        g.iter()
                            .zip(a)
                            .zip(b)
                            .map(|((&gv, &av), &bv)| -gv * av / (bv * bv))
                            .collect::<Vec<_>>()
                    })
                });
                parents[1].accum_grad_owned(db);
            }),
        ))
    }

    pub fn neg(&self) -> Tensor<T> {
        let data = self.with_data(|a| a.iter().map(|&x| -x).collect::<Vec<_>>());
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|g, parents| {
                parents[0].accum_grad_owned(g.iter().map(|&v| -v).collect());
            }),
        )
    }

    pub fn add_scalar(&self, c: T) -> Tensor<T> {
        let data = self.with_data(|a| a.iter().map(|&x| x + c).collect::<Vec<_>>());
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|g, parents| parents[0].accum_grad(g)),
        )
    }

    pub fn mul_scalar(&self, c: T) -> Tensor<T> {
        let data = self.with_data(|a| a.iter().map(|&x| x * c).collect::<Vec<_>>());
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g, parents| {
                parents[0].accum_grad_owned(g.iter().map(|&v| v * c).collect());
            }),
        )
    }

    /// Adds `rhs` broadcast over the leading axes: `rhs.shape()` must be a
    /// suffix of `self.shape()`. Covers bias addition and learned position
    /// embeddings.
    pub fn add_suffix(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let s = self.shape();
        let r = rhs.shape();
        if r.len() > s.len() || &s[s.len() - r.len()..] != r {
            return Err(Error::shape(format!(
                "add_suffix: {:?} is not a suffix of {:?}",
                r, s
            )));
        }
        let chunk = rhs.numel();
        let data = self.with_data(|a| {
            rhs.with_data(|b| {
                let mut out = Vec::with_capacity(a.len());
                for block in a.chunks(chunk) {
                    out.extend(block.iter().zip(b).map(|(&x, &y)| x + y));
                }
                out
            })
        });
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g, parents| {
                parents[0].accum_grad(g);
                let mut db = vec![T::ZERO; chunk];
                for block in g.chunks(chunk) {
                    for (d, &gv) in db.iter_mut().zip(block) {
                        *d += gv;
                    }
                }
                parents[1].accum_grad_owned(db);
            }),
        ))
    }

    /// Adds a per-channel bias `[C]` to an NCHW tensor.
    pub fn add_channel_bias(&self, bias: &Tensor<T>) -> Result<Tensor<T>> {
        let s = self.shape();
        if s.len() != 4 || bias.shape() != [s[1]] {
            return Err(Error::shape(format!(
                "add_channel_bias: input {:?}, bias {:?}",
                s,
                bias.shape()
            )));
        }
        let (c, hw) = (s[1], s[2] * s[3]);
        let data = self.with_data(|a| {
            bias.with_data(|b| {
                let mut out = Vec::with_capacity(a.len());
                for img in a.chunks(c * hw) {
                    for (ch, plane) in img.chunks(hw).enumerate() {
                        let bv = b[ch];
                        out.extend(plane.iter().map(|&x| x + bv));
                    }
                }
                out
            })
        });
        Ok(Tensor::from_op(
            s.to_vec(),
            data,
            vec![self.clone(), bias.clone()],
            Box::new(move |g, parents| {
                parents[0].accum_grad(g);
                let mut db = vec![T::ZERO; c];
                for img in g.chunks(c * hw) {
                    for (ch, plane) in img.chunks(hw).enumerate() {
                        let mut acc = T::ZERO;
                        for &gv in plane {
                            acc += gv;
                        }
                        db[ch] += acc;
                    }
                }
                parents[1].accum_grad_owned(db);
            }),
        ))
    }

    /// 2-D matrix product `[M,K]·[K,N] -> [M,N]`.
    pub fn matmul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let (sa, sb) = (self.shape(), rhs.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(format!(
                "matmul: incompatible shapes {:?} · {:?}",
                sa, sb
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::ZERO; m * n];
        self.with_data(|a| rhs.with_data(|b| matmul_raw(a, b, m, k, n, &mut out)));
        Ok(Tensor::from_op(
            vec![m, n],
            out,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g, parents| {
                // da[m,k] = sum_n g[m,n] * b[k,n]
                let da = parents[1].with_data(|b| {
                    let mut da = vec![T::ZERO; m * k];
                    for row in 0..m {
                        let g_row = &g[row * n..(row + 1) * n];
                        for p in 0..k {
                            let b_row = &b[p * n..(p + 1) * n];
                            let mut acc = T::ZERO;
                            for (&gv, &bv) in g_row.iter().zip(b_row) {
                                acc += gv * bv;
                            }
                            da[row * k + p] = acc;
                        }
                    }
                    da
                });
                parents[0].accum_grad_owned(da);
                // db[k,n] = sum_m a[m,k] * g[m,n]
                let db = parents[0].with_data(|a| {
                    let mut db = vec![T::ZERO; k * n];
                    for row in 0..m {
                        let g_row = &g[row * n..(row + 1) * n];
                        for p in 0..k {
                            let av = a[row * k + p];
                            if av == T::ZERO {
                                continue;
                            }
                            let db_row = &mut db[p * n..(p + 1) * n];
                            for (d, &gv) in db_row.iter_mut().zip(g_row) {
                                *d += av * gv;
                            }
                        }
                    }
                    db
                });
                parents[1].accum_grad_owned(db);
            }),
        ))
    }

    /// Batched matrix product `[G,M,K]·[G,K,N] -> [G,M,N]`.
    pub fn bmm(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let (sa, sb) = (self.shape(), rhs.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::shape(format!(
                "bmm: incompatible shapes {:?} · {:?}",
                sa, sb
            )));
        }
        let (gq, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![T::ZERO; gq * m * n];
        self.with_data(|a| {
            rhs.with_data(|b| {
                for gi in 0..gq {
                    matmul_raw(
                        &a[gi * m * k..(gi + 1) * m * k],
                        &b[gi * k * n..(gi + 1) * k * n],
                        m,
                        k,
                        n,
                        &mut out[gi * m * n..(gi + 1) * m * n],
                    );
                }
            })
        });
        Ok(Tensor::from_op(
            vec![gq, m, n],
            out,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g, parents| {
                let da = parents[1].with_data(|b| {
                    let mut da = vec![T::ZERO; gq * m * k];
                    for gi in 0..gq {
                        let gmat = &g[gi * m * n..(gi + 1) * m * n];
                        let bmat = &b[gi * k * n..(gi + 1) * k * n];
                        let dmat = &mut da[gi * m * k..(gi + 1) * m * k];
                        for row in 0..m {
                            let g_row = &gmat[row * n..(row + 1) * n];
                            for p in 0..k {
                                let b_row = &bmat[p * n..(p + 1) * n];
                                let mut acc = T::ZERO;
                                for (&gv, &bv) in g_row.iter().zip(b_row) {
                                    acc += gv * bv;
                                }
                                dmat[row * k + p] = acc;
                            }
                        }
                    }
                    da
                });
                parents[0].accum_grad_owned(da);
                let db = parents[0].with_data(|a| {
                    let mut db = vec![T::ZERO; gq * k * n];
                    for gi in 0..gq {
                        let gmat = &g[gi * m * n..(gi + 1) * m * n];
                        let amat = &a[gi * m * k..(gi + 1) * m * k];
                        let dmat = &mut db[gi * k * n..(gi + 1) * k * n];
                        for row in 0..m {
                            let g_row = &gmat[row * n..(row + 1) * n];
                            for p in 0..k {
                                let av = amat[row * k + p];
                                if av == T::ZERO {
                                    continue;
                                }
                                let d_row = &mut dmat[p * n..(p + 1) * n];
                                for (d, &gv) in d_row.iter_mut().zip(g_row) {
                                    *d += av * gv;
                                }
                            }
                        }
                    }
                    db
                });
                parents[1].accum_grad_owned(db);
            }),
        ))
    }

    /// Softmax over the last axis, with per-row max subtraction.
    pub fn softmax_rows(&self) -> Result<Tensor<T>> {
        let s = self.shape();
        if s.is_empty() {
            return Err(Error::shape("softmax_rows: rank-0 input"));
        }
        let d = s[s.len() - 1];
        let data = self.with_data(|a| {
            let mut out = Vec::with_capacity(a.len());
            for row in a.chunks(d) {
                let mut mx = row[0];
                for &v in row {
                    mx = mx.max_with(v);
                }
                let mut sum = T::ZERO;
                let start = out.len();
                for &v in row {
                    let e = (v - mx).exp();
                    out.push(e);
                    sum += e;
                }
                for v in &mut out[start..] {
                    *v = *v / sum;
                }
            }
            out
        });
        let y = data.clone();
        Ok(Tensor::from_op(
            s.to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g, parents| {
                // dx = y ⊙ (g − <g,y> per row)
                let mut dx = vec![T::ZERO; g.len()];
                for (row, (g_row, y_row)) in g.chunks(d).zip(y.chunks(d)).enumerate() {
                    let mut dot = T::ZERO;
                    for (&gv, &yv) in g_row.iter().zip(y_row) {
                        dot += gv * yv;
                    }
                    let dx_row = &mut dx[row * d..(row + 1) * d];
                    for ((o, &gv), &yv) in dx_row.iter_mut().zip(g_row).zip(y_row) {
                        *o = yv * (gv - dot);
                    }
                }
                parents[0].accum_grad_owned(dx);
            }),
        ))
    }

    /// Exact GELU: `0.5·x·(1 + erf(x/√2))`.
    pub fn gelu(&self) -> Tensor<T> {
        let half = T::from_f64(0.5);
        let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
        let data = self.with_data(|a| {
            a.iter()
                .map(|&x| half * x * (T::ONE + (x * inv_sqrt2).erf()))
                .collect::<Vec<_>>()
        });
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g, parents| {
                let inv_sqrt_2pi = T::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
                let dx = parents[0].with_data(|a| {
                    a.iter()
                        .zip(g)
                        .map(|(&x, &gv)| {
                            let cdf = half * (T::ONE + (x * inv_sqrt2).erf());
                            let pdf = inv_sqrt_2pi * (-half * x * x).exp();
                            gv * (cdf + x * pdf)
                        })
                        .collect::<Vec<_>>()
                });
                parents[0].accum_grad_owned(dx);
            }),
        )
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        let data = self.with_data(|a| a.iter().map(|&x| sigmoid_scalar(x)).collect::<Vec<_>>());
        let y = data.clone();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g, parents| {
                let dx = y
                    .iter()
                    .zip(g)
                    .map(|(&yv, &gv)| gv * yv * (T::ONE - yv))
                    .collect::<Vec<_>>();
                parents[0].accum_grad_owned(dx);
            }),
        )
    }

    /// Reinterprets the buffer with a new shape of equal element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::shape(format!(
                "reshape: {:?} -> {:?} changes element count",
                self.shape(),
                shape
            )));
        }
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            Box::new(|g, parents| parents[0].accum_grad(g)),
        ))
    }

    /// Permutes axes; `perm` must be a permutation of `0..rank`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor<T>> {
        let s = self.shape();
        let rank = s.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape(format!(
                "permute: {:?} is not a permutation of 0..{}",
                perm, rank
            )));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
        let data = permute_raw(&self.to_vec(), s, perm);
        let perm_owned = perm.to_vec();
        let in_shape = s.to_vec();
        Ok(Tensor::from_op(
            out_shape.clone(),
            data,
            vec![self.clone()],
            Box::new(move |g, parents| {
                // Inverse permutation maps the gradient back.
                let mut inv = vec![0usize; perm_owned.len()];
                for (i, &p) in perm_owned.iter().enumerate() {
                    inv[p] = i;
                }
                let out_shape: Vec<usize> = perm_owned.iter().map(|&p| in_shape[p]).collect();
                parents[0].accum_grad_owned(permute_raw(g, &out_shape, &inv));
            }),
        ))
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&self) -> Result<Tensor<T>> {
        if self.shape().len() != 2 {
            return Err(Error::shape(format!(
                "transpose: expected rank 2, got {:?}",
                self.shape()
            )));
        }
        self.permute(&[1, 0])
    }

    /// Sum of all elements, as a `[1]` scalar.
    pub fn sum(&self) -> Tensor<T> {
        let total = self.with_data(|a| {
            let mut acc = T::ZERO;
            for &v in a {
                acc += v;
            }
            acc
        });
        let n = self.numel();
        Tensor::from_op(
            vec![1],
            vec![total],
            vec![self.clone()],
            Box::new(move |g, parents| {
                parents[0].accum_grad_owned(vec![g[0]; n]);
            }),
        )
    }

    /// Mean of all elements, as a `[1]` scalar.
    pub fn mean(&self) -> Tensor<T> {
        let n = self.numel();
        let inv = T::ONE / T::from_f64(n as f64);
        self.sum().mul_scalar(inv)
    }

    /// Mean over the last axis: `[..., D] -> [...]`.
    pub fn mean_lastdim(&self) -> Result<Tensor<T>> {
        let s = self.shape();
        if s.is_empty() {
            return Err(Error::shape("mean_lastdim: rank-0 input"));
        }
        let d = s[s.len() - 1];
        let out_shape = s[..s.len() - 1].to_vec();
        let inv = T::ONE / T::from_f64(d as f64);
        let data = self.with_data(|a| {
            a.chunks(d)
                .map(|row| {
                    let mut acc = T::ZERO;
                    for &v in row {
                        acc += v;
                    }
                    acc * inv
                })
                .collect::<Vec<_>>()
        });
        Ok(Tensor::from_op(
            out_shape,
            data,
            vec![self.clone()],
            Box::new(move |g, parents| {
                let mut dx = Vec::with_capacity(g.len() * d);
                for &gv in g {
                    let v = gv * inv;
                    dx.extend(std::iter::repeat_n(v, d));
                }
                parents[0].accum_grad_owned(dx);
            }),
        ))
    }
}

impl<T: Element> Tensor<T> {
    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn slice_axis(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        let s = self.shape();
        if axis >= s.len() || start + len > s[axis] {
            return Err(Error::shape(format!(
                "slice_axis: [{start}, {}) out of range for axis {axis} of {:?}",
                start + len,
                s
            )));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let ax = s[axis];
        let mut out_shape = s.to_vec();
        out_shape[axis] = len;
        let data = self.with_data(|buf| {
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * ax + start) * inner;
                out.extend_from_slice(&buf[base..base + len * inner]);
            }
            out
        });
        let full = self.numel();
        Ok(Tensor::from_op(
            out_shape,
            data,
            vec![self.clone()],
            Box::new(move |g, parents| {
                let mut dx = vec![T::ZERO; full];
                for o in 0..outer {
                    let base = (o * ax + start) * inner;
                    dx[base..base + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                parents[0].accum_grad_owned(dx);
            }),
        ))
    }

    /// Cyclic roll by `shift` along `axis` (elements wrap around).
    pub fn roll_axis(&self, axis: usize, shift: usize) -> Result<Tensor<T>> {
        let ax = self.shape()[axis];
        let shift = shift % ax;
        if shift == 0 {
            return self.slice_axis(axis, 0, ax);
        }
        let head = self.slice_axis(axis, ax - shift, shift)?;
        let tail = self.slice_axis(axis, 0, ax - shift)?;
        concat(&[head, tail], axis)
    }
}

/// Concatenates tensors along `axis`; shapes must agree elsewhere.
pub fn concat<T: Element>(parts: &[Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    if parts.is_empty() {
        return Err(Error::shape("concat: empty input list"));
    }
    let base = parts[0].shape().to_vec();
    if axis >= base.len() {
        return Err(Error::shape(format!(
            "concat: axis {} out of range for rank {}",
            axis,
            base.len()
        )));
    }
    let mut axis_total = 0usize;
    for p in parts {
        let s = p.shape();
        if s.len() != base.len()
            || s.iter()
                .zip(&base)
                .enumerate()
                .any(|(i, (&a, &b))| i != axis && a != b)
        {
            return Err(Error::shape(format!(
                "concat: shape {:?} incompatible with {:?} along axis {}",
                s, base, axis
            )));
        }
        axis_total += s[axis];
    }
    let mut out_shape = base.clone();
    out_shape[axis] = axis_total;

    let outer: usize = base[..axis].iter().product();
    let inner: usize = base[axis + 1..].iter().product();
    let mut data = Vec::with_capacity(outer * axis_total * inner);
    let part_axis: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
    for o in 0..outer {
        for (p, &ax) in parts.iter().zip(&part_axis) {
            p.with_data(|buf| {
                let start = o * ax * inner;
                data.extend_from_slice(&buf[start..start + ax * inner]);
            });
        }
    }
    Ok(Tensor::from_op(
        out_shape,
        data,
        parts.to_vec(),
        Box::new(move |g, parents| {
            let mut grads: Vec<Vec<T>> = part_axis
                .iter()
                .map(|&ax| Vec::with_capacity(outer * ax * inner))
                .collect();
            let mut cursor = 0usize;
            for _o in 0..outer {
                for (gi, &ax) in part_axis.iter().enumerate() {
                    grads[gi].extend_from_slice(&g[cursor..cursor + ax * inner]);
                    cursor += ax * inner;
                }
            }
            for (p, grad) in parents.iter().zip(grads) {
                p.accum_grad_owned(grad);
            }
        }),
    ))
}

/// Numerically stable binary cross entropy on logits, mean-reduced.
///
/// `targets` (and `weights`, when given) are treated as constants; gradients
/// flow only to `logits`. Targets must lie in `[0,1]`; weights are the
/// per-element factors of a weighted BCE.
pub fn bce_with_logits<T: Element>(
    logits: &Tensor<T>,
    targets: &Tensor<T>,
    weights: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    same_shape(logits, targets, "bce_with_logits")?;
    if let Some(w) = weights {
        same_shape(logits, w, "bce_with_logits weights")?;
    }
    let bad = targets.with_data(|t| {
        t.iter()
            .find(|&&v| !(v >= T::ZERO && v <= T::ONE))
            .copied()
    });
    if let Some(v) = bad {
        return Err(Error::Numerics(format!(
            "bce target {v} outside [0,1]"
        )));
    }
    let n = logits.numel();
    let inv_n = T::ONE / T::from_f64(n as f64);
    let w_buf: Option<Vec<T>> = weights.map(|w| w.to_vec());
    let total = logits.with_data(|z| {
        targets.with_data(|t| {
            let mut acc = T::ZERO;
            for (i, (&zv, &tv)) in z.iter().zip(t).enumerate() {
                // max(z,0) − z·t + ln(1 + exp(−|z|))
                let term = zv.max_with(T::ZERO) - zv * tv + (T::ONE + (-zv.abs()).exp()).ln();
                let wv = w_buf.as_ref().map_or(T::ONE, |w| w[i]);
                acc += wv * term;
            }
            acc
        })
    });
    let t_buf = targets.to_vec();
    Ok(Tensor::from_op(
        vec![1],
        vec![total * inv_n],
        vec![logits.clone()],
        Box::new(move |g, parents| {
            let scale = g[0] * inv_n;
            let dz = parents[0].with_data(|z| {
                z.iter()
                    .enumerate()
                    .map(|(i, &zv)| {
                        let wv = w_buf.as_ref().map_or(T::ONE, |w| w[i]);
                        scale * wv * (sigmoid_scalar(zv) - t_buf[i])
                    })
                    .collect::<Vec<_>>()
            });
            parents[0].accum_grad_owned(dz);
        }),
    ))
}

pub(crate) fn sigmoid_scalar<T: Element>(x: T) -> T {
    if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

fn permute_raw<T: Element>(data: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    if data.is_empty() {
        return Vec::new();
    }
    let rank = shape.len();
    let in_strides = strides_of(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut out = vec![data[0]; data.len()];
    // Walk output indices in order; map each to its input offset.
    let mut idx = vec![0usize; rank];
    for o in out.iter_mut() {
        let mut in_off = 0usize;
        for (k, &i) in idx.iter().enumerate() {
            in_off += i * in_strides[perm[k]];
        }
        *o = data[in_off];
        for k in (0..rank).rev() {
            idx[k] += 1;
            if idx[k] < out_shape[k] {
                break;
            }
            idx[k] = 0;
        }
    }
    out
}
