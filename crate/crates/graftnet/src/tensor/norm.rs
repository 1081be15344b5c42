//! Layer and batch normalization primitives.

use super::{Element, Tensor};
use crate::error::{Error, Result};

impl<T: Element> Tensor<T> {
    /// Layer norm over the last axis: standardize each row to mean 0 /
    /// variance 1 (population variance), then apply `gain`/`bias` of shape
    /// `[D]`.
    pub fn layer_norm(&self, gain: &Tensor<T>, bias: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
        let s = self.shape();
        let d = *s.last().ok_or_else(|| Error::shape("layer_norm: rank-0 input"))?;
        if d == 0 {
            return Err(Error::shape("layer_norm: zero-width last axis"));
        }
        if gain.shape() != [d] || bias.shape() != [d] {
            return Err(Error::shape(format!(
                "layer_norm: gain {:?} / bias {:?} must be [{d}]",
                gain.shape(),
                bias.shape()
            )));
        }
        let rows = self.numel() / d;
        let inv_d = T::ONE / T::from_f64(d as f64);
        let eps_t = T::from_f64(eps);
        let mut xhat = vec![T::ZERO; self.numel()];
        let mut inv_std = vec![T::ZERO; rows];
        let data = self.with_data(|x| {
            gain.with_data(|gm| {
                bias.with_data(|bt| {
                    let mut out = Vec::with_capacity(x.len());
                    for (r, row) in x.chunks(d).enumerate() {
                        let mut mean = T::ZERO;
                        for &v in row {
                            mean += v;
                        }
                        mean = mean * inv_d;
                        let mut var = T::ZERO;
                        for &v in row {
                            let c = v - mean;
                            var += c * c;
                        }
                        var = var * inv_d;
                        let inv = T::ONE / (var + eps_t).sqrt();
                        inv_std[r] = inv;
                        for (j, &v) in row.iter().enumerate() {
                            let xh = (v - mean) * inv;
                            xhat[r * d + j] = xh;
                            out.push(gm[j] * xh + bt[j]);
                        }
                    }
                    out
                })
            })
        });
        Ok(Tensor::from_op(
            s.to_vec(),
            data,
            vec![self.clone(), gain.clone(), bias.clone()],
            Box::new(move |g, parents| {
                let (x_t, gain_t, bias_t) = (&parents[0], &parents[1], &parents[2]);
                let mut dgain = vec![T::ZERO; d];
                let mut dbias = vec![T::ZERO; d];
                for (g_row, xh_row) in g.chunks(d).zip(xhat.chunks(d)) {
                    for j in 0..d {
                        dgain[j] += g_row[j] * xh_row[j];
                        dbias[j] += g_row[j];
                    }
                }
                let dx = gain_t.with_data(|gm| {
                    let mut dx = vec![T::ZERO; g.len()];
                    for (r, (g_row, xh_row)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        // dx = inv·(dxh − mean(dxh) − x̂·mean(dxh ⊙ x̂))
                        let mut m1 = T::ZERO;
                        let mut m2 = T::ZERO;
                        for j in 0..d {
                            let dxh = g_row[j] * gm[j];
                            m1 += dxh;
                            m2 += dxh * xh_row[j];
                        }
                        m1 = m1 * inv_d;
                        m2 = m2 * inv_d;
                        let inv = inv_std[r];
                        let dx_row = &mut dx[r * d..(r + 1) * d];
                        for j in 0..d {
                            let dxh = g_row[j] * gm[j];
                            dx_row[j] = inv * (dxh - m1 - xh_row[j] * m2);
                        }
                    }
                    dx
                });
                x_t.accum_grad_owned(dx);
                gain_t.accum_grad_owned(dgain);
                bias_t.accum_grad_owned(dbias);
            }),
        ))
    }

    /// Train-mode batch norm over NCHW: per-channel statistics across
    /// `B·H·W`. Returns the normalized tensor plus the batch mean and
    /// population variance per channel (for the running-stat update).
    pub fn batch_norm_train(
        &self,
        gain: &Tensor<T>,
        bias: &Tensor<T>,
        eps: f64,
    ) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(Error::shape(format!("batch_norm: expected NCHW, got {:?}", s)));
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let n = b * h * w;
        if n < 2 {
            return Err(Error::shape(
                "batch_norm: train mode needs at least 2 samples per channel",
            ));
        }
        if gain.shape() != [c] || bias.shape() != [c] {
            return Err(Error::shape(format!(
                "batch_norm: gain {:?} / bias {:?} must be [{c}]",
                gain.shape(),
                bias.shape()
            )));
        }
        let hw = h * w;
        let inv_n = T::ONE / T::from_f64(n as f64);
        let eps_t = T::from_f64(eps);
        let mut mean = vec![T::ZERO; c];
        let mut var = vec![T::ZERO; c];
        self.with_data(|x| {
            for ch in 0..c {
                let mut acc = T::ZERO;
                for bi in 0..b {
                    let plane = &x[(bi * c + ch) * hw..(bi * c + ch + 1) * hw];
                    for &v in plane {
                        acc += v;
                    }
                }
                let m = acc * inv_n;
                let mut vv = T::ZERO;
                for bi in 0..b {
                    let plane = &x[(bi * c + ch) * hw..(bi * c + ch + 1) * hw];
                    for &v in plane {
                        let d = v - m;
                        vv += d * d;
                    }
                }
                mean[ch] = m;
                var[ch] = vv * inv_n;
            }
        });
        let mut xhat = vec![T::ZERO; self.numel()];
        let inv_std: Vec<T> = var.iter().map(|&v| T::ONE / (v + eps_t).sqrt()).collect();
        let data = self.with_data(|x| {
            gain.with_data(|gm| {
                bias.with_data(|bt| {
                    let mut out = vec![T::ZERO; x.len()];
                    for bi in 0..b {
                        for ch in 0..c {
                            let off = (bi * c + ch) * hw;
                            for i in 0..hw {
                                let xh = (x[off + i] - mean[ch]) * inv_std[ch];
                                xhat[off + i] = xh;
                                out[off + i] = gm[ch] * xh + bt[ch];
                            }
                        }
                    }
                    out
                })
            })
        });
        let mean_out = mean.clone();
        let var_out = var.clone();
        let out = Tensor::from_op(
            s.to_vec(),
            data,
            vec![self.clone(), gain.clone(), bias.clone()],
            Box::new(move |g, parents| {
                let (x_t, gain_t, bias_t) = (&parents[0], &parents[1], &parents[2]);
                let mut dgain = vec![T::ZERO; c];
                let mut dbias = vec![T::ZERO; c];
                for bi in 0..b {
                    for ch in 0..c {
                        let off = (bi * c + ch) * hw;
                        for i in 0..hw {
                            dgain[ch] += g[off + i] * xhat[off + i];
                            dbias[ch] += g[off + i];
                        }
                    }
                }
                let dx = gain_t.with_data(|gm| {
                    let mut dx = vec![T::ZERO; g.len()];
                    for ch in 0..c {
                        // means over the batch of dxh and dxh·x̂
                        let mut m1 = T::ZERO;
                        let mut m2 = T::ZERO;
                        for bi in 0..b {
                            let off = (bi * c + ch) * hw;
                            for i in 0..hw {
                                let dxh = g[off + i] * gm[ch];
                                m1 += dxh;
                                m2 += dxh * xhat[off + i];
                            }
                        }
                        m1 = m1 * inv_n;
                        m2 = m2 * inv_n;
                        for bi in 0..b {
                            let off = (bi * c + ch) * hw;
                            for i in 0..hw {
                                let dxh = g[off + i] * gm[ch];
                                dx[off + i] = inv_std[ch] * (dxh - m1 - xhat[off + i] * m2);
                            }
                        }
                    }
                    dx
                });
                x_t.accum_grad_owned(dx);
                gain_t.accum_grad_owned(dgain);
                bias_t.accum_grad_owned(dbias);
            }),
        );
        Ok((out, mean_out, var_out))
    }

    /// Eval-mode batch norm: normalizes with fixed running statistics.
    pub fn batch_norm_eval(
        &self,
        gain: &Tensor<T>,
        bias: &Tensor<T>,
        running_mean: &[T],
        running_var: &[T],
        eps: f64,
    ) -> Result<Tensor<T>> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(Error::shape(format!("batch_norm: expected NCHW, got {:?}", s)));
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        if gain.shape() != [c] || bias.shape() != [c] || running_mean.len() != c || running_var.len() != c
        {
            return Err(Error::shape("batch_norm eval: per-channel buffers must be [C]"));
        }
        let hw = h * w;
        let eps_t = T::from_f64(eps);
        let inv_std: Vec<T> = running_var
            .iter()
            .map(|&v| T::ONE / (v + eps_t).sqrt())
            .collect();
        let mu = running_mean.to_vec();
        let data = self.with_data(|x| {
            gain.with_data(|gm| {
                bias.with_data(|bt| {
                    let mut out = vec![T::ZERO; x.len()];
                    for bi in 0..b {
                        for ch in 0..c {
                            let off = (bi * c + ch) * hw;
                            for i in 0..hw {
                                out[off + i] = gm[ch] * (x[off + i] - mu[ch]) * inv_std[ch] + bt[ch];
                            }
                        }
                    }
                    out
                })
            })
        });
        Ok(Tensor::from_op(
            s.to_vec(),
            data,
            vec![self.clone(), gain.clone(), bias.clone()],
            Box::new(move |g, parents| {
                let (x_t, gain_t, bias_t) = (&parents[0], &parents[1], &parents[2]);
                let mut dgain = vec![T::ZERO; c];
                let mut dbias = vec![T::ZERO; c];
                let dx = gain_t.with_data(|gm| {
                    x_t.with_data(|x| {
                        let mut dx = vec![T::ZERO; g.len()];
                        for bi in 0..b {
                            for ch in 0..c {
                                let off = (bi * c + ch) * hw;
                                for i in 0..hw {
                                    let xh = (x[off + i] - mu[ch]) * inv_std[ch];
                                    dgain[ch] += g[off + i] * xh;
                                    dbias[ch] += g[off + i];
                                    dx[off + i] = g[off + i] * gm[ch] * inv_std[ch];
                                }
                            }
                        }
                        dx
                    })
                });
                x_t.accum_grad_owned(dx);
                gain_t.accum_grad_owned(dgain);
                bias_t.accum_grad_owned(dbias);
            }),
        ))
    }
}
