//! Spatial ops over NCHW tensors: convolution, pooling, bilinear resize.

// Index-based loops keep the kernel sweeps explicit and vectorizable.
#![allow(clippy::needless_range_loop, clippy::too_many_arguments)]

use rayon::prelude::*;

use super::{Element, Tensor};
use crate::error::{Error, Result};

fn nchw<T: Element>(x: &Tensor<T>, op: &str) -> Result<(usize, usize, usize, usize)> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::shape(format!("{op}: expected NCHW input, got {:?}", s)));
    }
    Ok((s[0], s[1], s[2], s[3]))
}

/// Output extent of a convolution/pooling window sweep.
pub(crate) fn conv_out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (input + 2 * padding - kernel) / stride + 1
}

fn conv2d_forward<T: Element>(
    x: &[T],
    w: &[T],
    b: usize,
    cin: usize,
    h: usize,
    wd: usize,
    cout: usize,
    k: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let mut out = vec![T::ZERO; b * cout * oh * ow];
    let in_img = cin * h * wd;
    let out_img = cout * oh * ow;
    for bi in 0..b {
        let x_img = &x[bi * in_img..(bi + 1) * in_img];
        let out_slice = &mut out[bi * out_img..(bi + 1) * out_img];
        // Each output channel is written by exactly one task; inner
        // accumulation order is fixed, so results are bitwise deterministic.
        let body = |co: usize, plane: &mut [T]| {
            let w_co = &w[co * cin * k * k..(co + 1) * cin * k * k];
            for ci in 0..cin {
                let x_ch = &x_img[ci * h * wd..(ci + 1) * h * wd];
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = w_co[ci * k * k + ky * k + kx];
                        if wv == T::ZERO {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let x_row = &x_ch[iy as usize * wd..(iy as usize + 1) * wd];
                            let o_row = &mut plane[oy * ow..(oy + 1) * ow];
                            if stride == 1 {
                                // Contiguous inner sweep; bounds resolved up front.
                                let kxi = kx as isize - padding as isize;
                                let ox_lo = (-kxi).max(0) as usize;
                                let ox_hi = ((wd as isize - kxi).min(ow as isize)).max(0) as usize;
                                let xs = (ox_lo as isize + kxi) as usize;
                                for (o, &xv) in o_row[ox_lo..ox_hi]
                                    .iter_mut()
                                    .zip(&x_row[xs..xs + (ox_hi - ox_lo)])
                                {
                                    *o += wv * xv;
                                }
                            } else {
                                for ox in 0..ow {
                                    let ix = (ox * stride + kx) as isize - padding as isize;
                                    if ix < 0 || ix >= wd as isize {
                                        continue;
                                    }
                                    o_row[ox] += wv * x_row[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        };
        if cout * oh * ow * cin * k * k >= (1 << 20) {
            out_slice
                .par_chunks_mut(oh * ow)
                .enumerate()
                .for_each(|(co, plane)| body(co, plane));
        } else {
            for (co, plane) in out_slice.chunks_mut(oh * ow).enumerate() {
                body(co, plane);
            }
        }
    }
    out
}

impl<T: Element> Tensor<T> {
    /// 2-D cross-correlation: input `[B,Cin,H,W]`, kernel `[Cout,Cin,k,k]`.
    /// Output spatial extent is `⌊(H+2p−k)/stride⌋+1`.
    pub fn conv2d(&self, weight: &Tensor<T>, stride: usize, padding: usize) -> Result<Tensor<T>> {
        let (b, cin, h, w) = nchw(self, "conv2d")?;
        let ws = weight.shape();
        if ws.len() != 4 || ws[1] != cin || ws[2] != ws[3] {
            return Err(Error::shape(format!(
                "conv2d: kernel {:?} incompatible with input {:?}",
                ws,
                self.shape()
            )));
        }
        let (cout, k) = (ws[0], ws[2]);
        if stride == 0 {
            return Err(Error::config("conv2d: stride must be ≥ 1"));
        }
        if h + 2 * padding < k || w + 2 * padding < k {
            return Err(Error::shape(format!(
                "conv2d: kernel {k}×{k} larger than padded input {}×{}",
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        let oh = conv_out_extent(h, k, stride, padding);
        let ow = conv_out_extent(w, k, stride, padding);
        let data = self.with_data(|x| {
            weight.with_data(|wt| {
                conv2d_forward(x, wt, b, cin, h, w, cout, k, stride, padding, oh, ow)
            })
        });
        Ok(Tensor::from_op(
            vec![b, cout, oh, ow],
            data,
            vec![self.clone(), weight.clone()],
            Box::new(move |g, parents| {
                let (x_t, w_t) = (&parents[0], &parents[1]);
                // dx[ci,iy,ix] += w[co,ci,ky,kx] · g[co,oy,ox]
                let dx = w_t.with_data(|wt| {
                    let mut dx = vec![T::ZERO; b * cin * h * w];
                    for bi in 0..b {
                        let g_img = &g[bi * cout * oh * ow..(bi + 1) * cout * oh * ow];
                        let dx_img = &mut dx[bi * cin * h * w..(bi + 1) * cin * h * w];
                        dx_img
                            .par_chunks_mut(h * w)
                            .enumerate()
                            .for_each(|(ci, dx_ch)| {
                                for co in 0..cout {
                                    let g_ch = &g_img[co * oh * ow..(co + 1) * oh * ow];
                                    let w_co = &wt[(co * cin + ci) * k * k..(co * cin + ci + 1) * k * k];
                                    for ky in 0..k {
                                        for kx in 0..k {
                                            let wv = w_co[ky * k + kx];
                                            if wv == T::ZERO {
                                                continue;
                                            }
                                            for oy in 0..oh {
                                                let iy = (oy * stride + ky) as isize - padding as isize;
                                                if iy < 0 || iy >= h as isize {
                                                    continue;
                                                }
                                                let dx_row = &mut dx_ch
                                                    [iy as usize * w..(iy as usize + 1) * w];
                                                let g_row = &g_ch[oy * ow..(oy + 1) * ow];
                                                for ox in 0..ow {
                                                    let ix = (ox * stride + kx) as isize
                                                        - padding as isize;
                                                    if ix < 0 || ix >= w as isize {
                                                        continue;
                                                    }
                                                    dx_row[ix as usize] += wv * g_row[ox];
                                                }
                                            }
                                        }
                                    }
                                }
                            });
                    }
                    dx
                });
                x_t.accum_grad_owned(dx);
                // dw[co,ci,ky,kx] += x[ci,iy,ix] · g[co,oy,ox]
                let dw = x_t.with_data(|x| {
                    let mut dw = vec![T::ZERO; cout * cin * k * k];
                    dw.par_chunks_mut(cin * k * k)
                        .enumerate()
                        .for_each(|(co, dw_co)| {
                            for bi in 0..b {
                                let x_img = &x[bi * cin * h * w..(bi + 1) * cin * h * w];
                                let g_ch = &g[(bi * cout + co) * oh * ow
                                    ..(bi * cout + co + 1) * oh * ow];
                                for ci in 0..cin {
                                    let x_ch = &x_img[ci * h * w..(ci + 1) * h * w];
                                    for ky in 0..k {
                                        for kx in 0..k {
                                            let mut acc = T::ZERO;
                                            for oy in 0..oh {
                                                let iy = (oy * stride + ky) as isize
                                                    - padding as isize;
                                                if iy < 0 || iy >= h as isize {
                                                    continue;
                                                }
                                                let x_row = &x_ch
                                                    [iy as usize * w..(iy as usize + 1) * w];
                                                let g_row = &g_ch[oy * ow..(oy + 1) * ow];
                                                for ox in 0..ow {
                                                    let ix = (ox * stride + kx) as isize
                                                        - padding as isize;
                                                    if ix < 0 || ix >= w as isize {
                                                        continue;
                                                    }
                                                    acc += x_row[ix as usize] * g_row[ox];
                                                }
                                            }
                                            dw_co[ci * k * k + ky * k + kx] += acc;
                                        }
                                    }
                                }
                            }
                        });
                    dw
                });
                w_t.accum_grad_owned(dw);
            }),
        ))
    }

    /// Average pooling with square kernel `k` and stride `s`, no padding.
    pub fn avg_pool2d(&self, k: usize, s: usize) -> Result<Tensor<T>> {
        let (b, c, h, w) = nchw(self, "avg_pool2d")?;
        if k == 0 || s == 0 || h < k || w < k {
            return Err(Error::shape(format!(
                "avg_pool2d: kernel {k}/stride {s} invalid for {h}×{w}"
            )));
        }
        let oh = conv_out_extent(h, k, s, 0);
        let ow = conv_out_extent(w, k, s, 0);
        let inv = T::ONE / T::from_f64((k * k) as f64);
        let data = self.with_data(|x| {
            let mut out = Vec::with_capacity(b * c * oh * ow);
            for plane in x.chunks(h * w) {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = T::ZERO;
                        for ky in 0..k {
                            let row = &plane[(oy * s + ky) * w + ox * s..];
                            for kx in 0..k {
                                acc += row[kx];
                            }
                        }
                        out.push(acc * inv);
                    }
                }
            }
            out
        });
        Ok(Tensor::from_op(
            vec![b, c, oh, ow],
            data,
            vec![self.clone()],
            Box::new(move |g, parents| {
                let mut dx = vec![T::ZERO; b * c * h * w];
                for (plane_i, g_plane) in g.chunks(oh * ow).enumerate() {
                    let dx_plane = &mut dx[plane_i * h * w..(plane_i + 1) * h * w];
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gv = g_plane[oy * ow + ox] * inv;
                            for ky in 0..k {
                                let row = &mut dx_plane[(oy * s + ky) * w + ox * s..];
                                for kx in 0..k {
                                    row[kx] += gv;
                                }
                            }
                        }
                    }
                }
                parents[0].accum_grad_owned(dx);
            }),
        ))
    }

    /// Max pooling with square kernel `k` and stride `s`, no padding.
    pub fn max_pool2d(&self, k: usize, s: usize) -> Result<Tensor<T>> {
        let (b, c, h, w) = nchw(self, "max_pool2d")?;
        if k == 0 || s == 0 || h < k || w < k {
            return Err(Error::shape(format!(
                "max_pool2d: kernel {k}/stride {s} invalid for {h}×{w}"
            )));
        }
        let oh = conv_out_extent(h, k, s, 0);
        let ow = conv_out_extent(w, k, s, 0);
        let mut argmax = Vec::with_capacity(b * c * oh * ow);
        let data = self.with_data(|x| {
            let mut out = Vec::with_capacity(b * c * oh * ow);
            for plane in x.chunks(h * w) {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = plane[(oy * s) * w + ox * s];
                        let mut best_at = (oy * s) * w + ox * s;
                        for ky in 0..k {
                            for kx in 0..k {
                                let at = (oy * s + ky) * w + ox * s + kx;
                                if plane[at] > best {
                                    best = plane[at];
                                    best_at = at;
                                }
                            }
                        }
                        out.push(best);
                        argmax.push(best_at);
                    }
                }
            }
            out
        });
        Ok(Tensor::from_op(
            vec![b, c, oh, ow],
            data,
            vec![self.clone()],
            Box::new(move |g, parents| {
                let mut dx = vec![T::ZERO; b * c * h * w];
                for (plane_i, g_plane) in g.chunks(oh * ow).enumerate() {
                    let dx_plane = &mut dx[plane_i * h * w..(plane_i + 1) * h * w];
                    let arg_plane = &argmax[plane_i * oh * ow..(plane_i + 1) * oh * ow];
                    for (&gv, &at) in g_plane.iter().zip(arg_plane) {
                        dx_plane[at] += gv;
                    }
                }
                parents[0].accum_grad_owned(dx);
            }),
        ))
    }

    /// Adaptive average pooling to `out_h × out_w` (PyTorch bucket rule).
    pub fn adaptive_avg_pool2d(&self, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
        let (b, c, h, w) = nchw(self, "adaptive_avg_pool2d")?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::shape("adaptive_avg_pool2d: zero output extent"));
        }
        let bucket = |i: usize, n_out: usize, n_in: usize| -> (usize, usize) {
            let lo = i * n_in / n_out;
            let hi = ((i + 1) * n_in).div_ceil(n_out);
            (lo, hi)
        };
        let data = self.with_data(|x| {
            let mut out = Vec::with_capacity(b * c * out_h * out_w);
            for plane in x.chunks(h * w) {
                for oy in 0..out_h {
                    let (y0, y1) = bucket(oy, out_h, h);
                    for ox in 0..out_w {
                        let (x0, x1) = bucket(ox, out_w, w);
                        let mut acc = T::ZERO;
                        for iy in y0..y1 {
                            for ix in x0..x1 {
                                acc += plane[iy * w + ix];
                            }
                        }
                        out.push(acc / T::from_f64(((y1 - y0) * (x1 - x0)) as f64));
                    }
                }
            }
            out
        });
        Ok(Tensor::from_op(
            vec![b, c, out_h, out_w],
            data,
            vec![self.clone()],
            Box::new(move |g, parents| {
                let mut dx = vec![T::ZERO; b * c * h * w];
                for (plane_i, g_plane) in g.chunks(out_h * out_w).enumerate() {
                    let dx_plane = &mut dx[plane_i * h * w..(plane_i + 1) * h * w];
                    for oy in 0..out_h {
                        let (y0, y1) = bucket(oy, out_h, h);
                        for ox in 0..out_w {
                            let (x0, x1) = bucket(ox, out_w, w);
                            let gv = g_plane[oy * out_w + ox]
                                / T::from_f64(((y1 - y0) * (x1 - x0)) as f64);
                            for iy in y0..y1 {
                                for ix in x0..x1 {
                                    dx_plane[iy * w + ix] += gv;
                                }
                            }
                        }
                    }
                }
                parents[0].accum_grad_owned(dx);
            }),
        ))
    }

    /// Bilinear resize to `out_h × out_w` with the align-corners-false
    /// convention; differentiable (it is linear in the input values).
    pub fn resize_bilinear(&self, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
        let (b, c, h, w) = nchw(self, "resize_bilinear")?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::shape("resize_bilinear: zero output extent"));
        }
        // Each output sample mixes up to 4 input texels; precompute taps.
        let taps = |n_out: usize, n_in: usize| -> Vec<(usize, usize, f64)> {
            let scale = n_in as f64 / n_out as f64;
            (0..n_out)
                .map(|o| {
                    let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                    let i0 = (src.floor() as usize).min(n_in - 1);
                    let i1 = (i0 + 1).min(n_in - 1);
                    let frac = src - i0 as f64;
                    (i0, i1, frac)
                })
                .collect()
        };
        let ty = taps(out_h, h);
        let tx = taps(out_w, w);
        let data = self.with_data(|x| {
            let mut out = Vec::with_capacity(b * c * out_h * out_w);
            for plane in x.chunks(h * w) {
                for &(y0, y1, fy) in &ty {
                    for &(x0, x1, fx) in &tx {
                        let p00 = plane[y0 * w + x0].to_f64();
                        let p01 = plane[y0 * w + x1].to_f64();
                        let p10 = plane[y1 * w + x0].to_f64();
                        let p11 = plane[y1 * w + x1].to_f64();
                        let top = p00 + (p01 - p00) * fx;
                        let bot = p10 + (p11 - p10) * fx;
                        out.push(T::from_f64(top + (bot - top) * fy));
                    }
                }
            }
            out
        });
        Ok(Tensor::from_op(
            vec![b, c, out_h, out_w],
            data,
            vec![self.clone()],
            Box::new(move |g, parents| {
                let mut dx = vec![T::ZERO; b * c * h * w];
                for (plane_i, g_plane) in g.chunks(out_h * out_w).enumerate() {
                    let dx_plane = &mut dx[plane_i * h * w..(plane_i + 1) * h * w];
                    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                            let gv = g_plane[oy * out_w + ox].to_f64();
                            dx_plane[y0 * w + x0] += T::from_f64(gv * (1.0 - fy) * (1.0 - fx));
                            dx_plane[y0 * w + x1] += T::from_f64(gv * (1.0 - fy) * fx);
                            dx_plane[y1 * w + x0] += T::from_f64(gv * fy * (1.0 - fx));
                            dx_plane[y1 * w + x1] += T::from_f64(gv * fy * fx);
                        }
                    }
                }
                parents[0].accum_grad_owned(dx);
            }),
        ))
    }
}
