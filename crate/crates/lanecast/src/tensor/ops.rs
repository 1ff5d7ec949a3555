//! Forward operations and their backward closures.
//!
//! Shape conventions: rank-2 tensors are row-major `[rows, cols]`; conv
//! inputs are `[channels, length]` (1-D) or `[channels, height, width]`
//! (2-D); convolutions are valid (no padding).

use super::{Tensor, TensorError};

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl Tensor {
    /// Matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor, TensorError> {
        let (ls, rs) = (self.shape(), rhs.shape());
        if ls.len() != 2 || rs.len() != 2 || ls[1] != rs[0] {
            return Err(mismatch("matmul", ls, rs));
        }
        let (m, k, n) = (ls[0], ls[1], rs[1]);
        let a = self.values_ref().clone();
        let b = rhs.values_ref().clone();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = a[i * k + p];
                if av == 0.0 {
                    continue;
                }
                for j in 0..n {
                    out[i * n + j] += av * b[p * n + j];
                }
            }
        }
        Ok(Tensor::from_op(
            vec![m, n],
            out,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g, parents| {
                // dA = G B^T, dB = A^T G
                parents[0].with_grad_mut(|da| {
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += g[i * n + j] * b[p * n + j];
                            }
                            da[i * k + p] += acc;
                        }
                    }
                });
                parents[1].with_grad_mut(|db| {
                    for p in 0..k {
                        for j in 0..n {
                            let mut acc = 0.0;
                            for i in 0..m {
                                acc += a[i * k + p] * g[i * n + j];
                            }
                            db[p * n + j] += acc;
                        }
                    }
                });
            }),
        ))
    }

    /// Elementwise sum. A rank-1 right operand matching the last axis of a
    /// rank-2 left operand broadcasts over rows.
    pub fn add(&self, rhs: &Tensor) -> Result<Tensor, TensorError> {
        let (ls, rs) = (self.shape().to_vec(), rhs.shape().to_vec());
        let broadcast = ls.len() == 2 && rs.len() == 1 && rs[0] == ls[1];
        if !broadcast && ls != rs {
            return Err(mismatch("add", &ls, &rs));
        }
        let a = self.values_ref();
        let b = rhs.values_ref();
        let out: Vec<f64> = if broadcast {
            let n = rs[0];
            a.iter().enumerate().map(|(i, v)| v + b[i % n]).collect()
        } else {
            a.iter().zip(b.iter()).map(|(x, y)| x + y).collect()
        };
        drop(a);
        drop(b);
        Ok(Tensor::from_op(
            ls.clone(),
            out,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g, parents| {
                parents[0].accumulate_grad(g.iter().copied());
                if broadcast {
                    let n = rs[0];
                    parents[1].with_grad_mut(|db| {
                        for (i, gv) in g.iter().enumerate() {
                            db[i % n] += gv;
                        }
                    });
                } else {
                    parents[1].accumulate_grad(g.iter().copied());
                }
            }),
        ))
    }

    /// Elementwise difference of equal-shape tensors.
    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor, TensorError> {
        if self.shape() != rhs.shape() {
            return Err(mismatch("sub", self.shape(), rhs.shape()));
        }
        let out: Vec<f64> = self
            .values_ref()
            .iter()
            .zip(rhs.values_ref().iter())
            .map(|(x, y)| x - y)
            .collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), rhs.clone()],
            Box::new(|g, parents| {
                parents[0].accumulate_grad(g.iter().copied());
                parents[1].accumulate_grad(g.iter().map(|v| -v));
            }),
        ))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let out: Vec<f64> = self.values_ref().iter().map(|x| c * x).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g, parents| {
                parents[0].accumulate_grad(g.iter().map(|v| c * v));
            }),
        )
    }

    pub fn relu(&self) -> Tensor {
        let x = self.values_ref().clone();
        let out: Vec<f64> = x.iter().map(|v| v.max(0.0)).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g, parents| {
                parents[0].accumulate_grad(
                    g.iter()
                        .zip(&x)
                        .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 }),
                );
            }),
        )
    }

    pub fn elementwise_mul(&self, rhs: &Tensor) -> Result<Tensor, TensorError> {
        if self.shape() != rhs.shape() {
            return Err(mismatch("elementwise_mul", self.shape(), rhs.shape()));
        }
        let a = self.values_ref().clone();
        let b = rhs.values_ref().clone();
        let out: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x * y).collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g, parents| {
                parents[0].accumulate_grad(g.iter().zip(&b).map(|(gv, bv)| gv * bv));
                parents[1].accumulate_grad(g.iter().zip(&a).map(|(gv, av)| gv * av));
            }),
        ))
    }

    /// Natural log, elementwise. Caller guarantees positivity.
    pub fn ln(&self) -> Tensor {
        let x = self.values_ref().clone();
        let out: Vec<f64> = x.iter().map(|v| v.ln()).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g, parents| {
                parents[0].accumulate_grad(g.iter().zip(&x).map(|(gv, xv)| gv / xv));
            }),
        )
    }

    pub fn sum_all(&self) -> Tensor {
        let s: f64 = self.values_ref().iter().sum();
        let n = self.numel();
        Tensor::from_op(
            vec![1],
            vec![s],
            vec![self.clone()],
            Box::new(move |g, parents| {
                parents[0].accumulate_grad(std::iter::repeat(g[0]).take(n));
            }),
        )
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.numel() as f64;
        self.sum_all().scale(1.0 / n)
    }

    /// Scalar at flat index `i`.
    pub fn pick(&self, i: usize) -> Tensor {
        assert!(i < self.numel());
        let v = self.values_ref()[i];
        Tensor::from_op(
            vec![1],
            vec![v],
            vec![self.clone()],
            Box::new(move |g, parents| {
                parents[0].with_grad_mut(|d| d[i] += g[0]);
            }),
        )
    }

    /// Row `r` of a rank-2 tensor as a rank-1 tensor.
    pub fn row(&self, r: usize) -> Tensor {
        let s = self.shape().to_vec();
        assert!(s.len() == 2 && r < s[0]);
        let cols = s[1];
        let v = self.values_ref()[r * cols..(r + 1) * cols].to_vec();
        Tensor::from_op(
            vec![cols],
            v,
            vec![self.clone()],
            Box::new(move |g, parents| {
                parents[0].with_grad_mut(|d| {
                    for (j, gv) in g.iter().enumerate() {
                        d[r * cols + j] += gv;
                    }
                });
            }),
        )
    }

    /// Column slice `[start, start+len)` of a rank-2 tensor.
    pub fn cols(&self, start: usize, len: usize) -> Tensor {
        let s = self.shape().to_vec();
        assert!(s.len() == 2 && start + len <= s[1]);
        let (rows, cols) = (s[0], s[1]);
        let vals = self.values_ref();
        let mut out = Vec::with_capacity(rows * len);
        for i in 0..rows {
            out.extend_from_slice(&vals[i * cols + start..i * cols + start + len]);
        }
        drop(vals);
        Tensor::from_op(
            vec![rows, len],
            out,
            vec![self.clone()],
            Box::new(move |g, parents| {
                parents[0].with_grad_mut(|d| {
                    for i in 0..rows {
                        for j in 0..len {
                            d[i * cols + start + j] += g[i * len + j];
                        }
                    }
                });
            }),
        )
    }

    pub fn transpose(&self) -> Tensor {
        let s = self.shape().to_vec();
        assert_eq!(s.len(), 2);
        let (m, n) = (s[0], s[1]);
        let v = self.values_ref();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = v[i * n + j];
            }
        }
        drop(v);
        Tensor::from_op(
            vec![n, m],
            out,
            vec![self.clone()],
            Box::new(move |g, parents| {
                parents[0].with_grad_mut(|d| {
                    for i in 0..m {
                        for j in 0..n {
                            d[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }),
        )
    }

    /// Reinterpret with a new shape of equal element count.
    pub fn reshape(&self, shape: Vec<usize>) -> Tensor {
        assert_eq!(shape.iter().product::<usize>(), self.numel());
        let v = self.values_ref().clone();
        Tensor::from_op(
            shape,
            v,
            vec![self.clone()],
            Box::new(|g, parents| {
                parents[0].accumulate_grad(g.iter().copied());
            }),
        )
    }

    /// Concatenate along `axis` (0 or 1). Rank-1 tensors concatenate along 0.
    pub fn concat(tensors: &[Tensor], axis: usize) -> Result<Tensor, TensorError> {
        assert!(!tensors.is_empty());
        let rank = tensors[0].shape().len();
        if rank == 1 {
            assert_eq!(axis, 0);
            let mut out = Vec::new();
            let mut sizes = Vec::new();
            for t in tensors {
                if t.shape().len() != 1 {
                    return Err(mismatch("concat", tensors[0].shape(), t.shape()));
                }
                sizes.push(t.numel());
                out.extend_from_slice(&t.values_ref());
            }
            let total = out.len();
            return Ok(Tensor::from_op(
                vec![total],
                out,
                tensors.to_vec(),
                Box::new(move |g, parents| {
                    let mut off = 0;
                    for (p, sz) in parents.iter().zip(&sizes) {
                        p.accumulate_grad(g[off..off + sz].iter().copied());
                        off += sz;
                    }
                }),
            ));
        }
        assert!(rank == 2 && axis < 2);
        if axis == 0 {
            let cols = tensors[0].shape()[1];
            let mut out = Vec::new();
            let mut rows_each = Vec::new();
            for t in tensors {
                if t.shape().len() != 2 || t.shape()[1] != cols {
                    return Err(mismatch("concat", tensors[0].shape(), t.shape()));
                }
                rows_each.push(t.shape()[0]);
                out.extend_from_slice(&t.values_ref());
            }
            let total_rows: usize = rows_each.iter().sum();
            Ok(Tensor::from_op(
                vec![total_rows, cols],
                out,
                tensors.to_vec(),
                Box::new(move |g, parents| {
                    let mut off = 0;
                    for (p, r) in parents.iter().zip(&rows_each) {
                        let sz = r * cols;
                        p.accumulate_grad(g[off..off + sz].iter().copied());
                        off += sz;
                    }
                }),
            ))
        } else {
            let rows = tensors[0].shape()[0];
            let mut cols_each = Vec::new();
            for t in tensors {
                if t.shape().len() != 2 || t.shape()[0] != rows {
                    return Err(mismatch("concat", tensors[0].shape(), t.shape()));
                }
                cols_each.push(t.shape()[1]);
            }
            let total_cols: usize = cols_each.iter().sum();
            let mut out = vec![0.0; rows * total_cols];
            let mut off = 0;
            for (t, c) in tensors.iter().zip(&cols_each) {
                let v = t.values_ref();
                for i in 0..rows {
                    out[i * total_cols + off..i * total_cols + off + c]
                        .copy_from_slice(&v[i * c..(i + 1) * c]);
                }
                off += c;
            }
            let cols_each_b = cols_each.clone();
            Ok(Tensor::from_op(
                vec![rows, total_cols],
                out,
                tensors.to_vec(),
                Box::new(move |g, parents| {
                    let mut off = 0;
                    for (p, &c) in parents.iter().zip(&cols_each_b) {
                        p.with_grad_mut(|d| {
                            for i in 0..rows {
                                for j in 0..c {
                                    d[i * c + j] += g[i * total_cols + off + j];
                                }
                            }
                        });
                        off += c;
                    }
                }),
            ))
        }
    }

    /// Stack rank-1 tensors of equal length into a rank-2 tensor.
    pub fn stack_rows(rows: &[Tensor]) -> Result<Tensor, TensorError> {
        assert!(!rows.is_empty());
        let d = rows[0].numel();
        let mut out = Vec::with_capacity(rows.len() * d);
        for r in rows {
            if r.shape().len() != 1 || r.numel() != d {
                return Err(mismatch("stack_rows", rows[0].shape(), r.shape()));
            }
            out.extend_from_slice(&r.values_ref());
        }
        let n = rows.len();
        Ok(Tensor::from_op(
            vec![n, d],
            out,
            rows.to_vec(),
            Box::new(move |g, parents| {
                for (i, p) in parents.iter().enumerate() {
                    p.accumulate_grad(g[i * d..(i + 1) * d].iter().copied());
                }
            }),
        ))
    }

    /// Softmax along the last axis. Rank-1 input is one distribution; rank-2
    /// input normalizes each row.
    pub fn softmax(&self) -> Tensor {
        let s = self.shape().to_vec();
        let cols = *s.last().unwrap();
        let rows = self.numel() / cols;
        let x = self.values_ref().clone();
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let mx = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut z = 0.0;
            for (j, &v) in row.iter().enumerate() {
                let e = (v - mx).exp();
                out[r * cols + j] = e;
                z += e;
            }
            for j in 0..cols {
                out[r * cols + j] /= z;
            }
        }
        let y = out.clone();
        Tensor::from_op(
            s,
            out,
            vec![self.clone()],
            Box::new(move |g, parents| {
                parents[0].with_grad_mut(|d| {
                    for r in 0..rows {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..cols {
                            d[r * cols + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }),
        )
    }

    /// Layer normalization over the last axis with learnable gain and bias.
    pub fn layer_norm(
        &self,
        gamma: &Tensor,
        beta: &Tensor,
        eps: f64,
    ) -> Result<Tensor, TensorError> {
        let s = self.shape().to_vec();
        let cols = *s.last().unwrap();
        if gamma.shape() != [cols] || beta.shape() != [cols] {
            return Err(mismatch("layer_norm", &s, gamma.shape()));
        }
        let rows = self.numel() / cols;
        let x = self.values_ref().clone();
        let gm = gamma.values_ref().clone();
        let bt = beta.values_ref().clone();
        let mut out = vec![0.0; x.len()];
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let mean: f64 = row.iter().sum::<f64>() / cols as f64;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[r] = istd;
            for j in 0..cols {
                let h = (row[j] - mean) * istd;
                xhat[r * cols + j] = h;
                out[r * cols + j] = gm[j] * h + bt[j];
            }
        }
        Ok(Tensor::from_op(
            s,
            out,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |g, parents| {
                parents[0].with_grad_mut(|dx| {
                    for r in 0..rows {
                        let hr = &xhat[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let istd = inv_std[r];
                        let n = cols as f64;
                        // dL/dxhat_j = g_j * gamma_j
                        let mut sum_gh = 0.0;
                        let mut sum_gh_h = 0.0;
                        for j in 0..cols {
                            let gh = gr[j] * gm[j];
                            sum_gh += gh;
                            sum_gh_h += gh * hr[j];
                        }
                        for j in 0..cols {
                            let gh = gr[j] * gm[j];
                            dx[r * cols + j] +=
                                istd * (gh - sum_gh / n - hr[j] * sum_gh_h / n);
                        }
                    }
                });
                parents[1].with_grad_mut(|dg| {
                    for r in 0..rows {
                        for j in 0..cols {
                            dg[j] += g[r * cols + j] * xhat[r * cols + j];
                        }
                    }
                });
                parents[2].with_grad_mut(|db| {
                    for r in 0..rows {
                        for j in 0..cols {
                            db[j] += g[r * cols + j];
                        }
                    }
                });
            }),
        ))
    }

    /// Valid 1-D convolution: input `[c_in, len]`, kernel
    /// `[c_out, c_in, f]`, output `[c_out, (len - f) / stride + 1]`.
    pub fn conv1d(&self, kernel: &Tensor, stride: usize) -> Result<Tensor, TensorError> {
        let (is, ks) = (self.shape().to_vec(), kernel.shape().to_vec());
        if is.len() != 2 || ks.len() != 3 || ks[1] != is[0] || ks[2] > is[1] {
            return Err(mismatch("conv1d", &is, &ks));
        }
        let (c_in, len) = (is[0], is[1]);
        let (c_out, f) = (ks[0], ks[2]);
        let out_len = (len - f) / stride + 1;
        let x = self.values_ref().clone();
        let w = kernel.values_ref().clone();
        let mut out = vec![0.0; c_out * out_len];
        for co in 0..c_out {
            for o in 0..out_len {
                let mut acc = 0.0;
                for ci in 0..c_in {
                    for t in 0..f {
                        acc += w[(co * c_in + ci) * f + t] * x[ci * len + o * stride + t];
                    }
                }
                out[co * out_len + o] = acc;
            }
        }
        Ok(Tensor::from_op(
            vec![c_out, out_len],
            out,
            vec![self.clone(), kernel.clone()],
            Box::new(move |g, parents| {
                parents[0].with_grad_mut(|dx| {
                    for co in 0..c_out {
                        for o in 0..out_len {
                            let gv = g[co * out_len + o];
                            for ci in 0..c_in {
                                for t in 0..f {
                                    dx[ci * len + o * stride + t] +=
                                        gv * w[(co * c_in + ci) * f + t];
                                }
                            }
                        }
                    }
                });
                parents[1].with_grad_mut(|dw| {
                    for co in 0..c_out {
                        for o in 0..out_len {
                            let gv = g[co * out_len + o];
                            for ci in 0..c_in {
                                for t in 0..f {
                                    dw[(co * c_in + ci) * f + t] +=
                                        gv * x[ci * len + o * stride + t];
                                }
                            }
                        }
                    }
                });
            }),
        ))
    }

    /// Valid 2-D convolution: input `[c_in, h, w]`, kernel
    /// `[c_out, c_in, f, f]`.
    pub fn conv2d(&self, kernel: &Tensor, stride: usize) -> Result<Tensor, TensorError> {
        let (is, ks) = (self.shape().to_vec(), kernel.shape().to_vec());
        if is.len() != 3 || ks.len() != 4 || ks[1] != is[0] || ks[2] != ks[3] || ks[2] > is[1].min(is[2])
        {
            return Err(mismatch("conv2d", &is, &ks));
        }
        let (c_in, h, w) = (is[0], is[1], is[2]);
        let (c_out, f) = (ks[0], ks[2]);
        let oh = (h - f) / stride + 1;
        let ow = (w - f) / stride + 1;
        let x = self.values_ref().clone();
        let ker = kernel.values_ref().clone();
        let mut out = vec![0.0; c_out * oh * ow];
        for co in 0..c_out {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..c_in {
                        for ky in 0..f {
                            for kx in 0..f {
                                acc += ker[((co * c_in + ci) * f + ky) * f + kx]
                                    * x[(ci * h + oy * stride + ky) * w + ox * stride + kx];
                            }
                        }
                    }
                    out[(co * oh + oy) * ow + ox] = acc;
                }
            }
        }
        Ok(Tensor::from_op(
            vec![c_out, oh, ow],
            out,
            vec![self.clone(), kernel.clone()],
            Box::new(move |g, parents| {
                parents[0].with_grad_mut(|dx| {
                    for co in 0..c_out {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let gv = g[(co * oh + oy) * ow + ox];
                                for ci in 0..c_in {
                                    for ky in 0..f {
                                        for kx in 0..f {
                                            dx[(ci * h + oy * stride + ky) * w
                                                + ox * stride
                                                + kx] += gv
                                                * ker[((co * c_in + ci) * f + ky) * f + kx];
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
                parents[1].with_grad_mut(|dw| {
                    for co in 0..c_out {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let gv = g[(co * oh + oy) * ow + ox];
                                for ci in 0..c_in {
                                    for ky in 0..f {
                                        for kx in 0..f {
                                            dw[((co * c_in + ci) * f + ky) * f + kx] += gv
                                                * x[(ci * h + oy * stride + ky) * w
                                                    + ox * stride
                                                    + kx];
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
            }),
        ))
    }
}

/// Attention over a single head: `softmax(Q K^T / sqrt(d) + mask) V`.
///
/// `mask`, when given, is an additive `[len_q, len_k]` tensor (0 passes,
/// a large negative blocks).
pub fn scaled_dot_product_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: Option<&Tensor>,
) -> Result<Tensor, TensorError> {
    let d = q.shape()[1] as f64;
    let mut scores = q.matmul(&k.transpose())?.scale(1.0 / d.sqrt());
    if let Some(m) = mask {
        scores = scores.add(m)?;
    }
    scores.softmax().matmul(v)
}
