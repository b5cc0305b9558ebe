//! Differentiable operations over [`Tensor`].
//!
//! Each op validates shapes, computes the forward value eagerly, and (only
//! when an input needs gradients) records a closure that scatters the
//! upstream gradient into its parents. Backward closures re-read parent
//! values through their handles, so they must run before any in-place
//! parameter update — the training loops in this crate always call
//! `backward()` before the optimizer step.
//!
//! All loops are plain sequential f32 accumulation in a fixed order; there
//! is no threading and no reassociation, so results are bit-stable for a
//! given input.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(Error::ShapeMismatch {
            op,
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        })
    }
}

// ---------------------------------------------------------------------------
// Raw matmul kernels. `out` must be zeroed; all kernels accumulate.
// ---------------------------------------------------------------------------

/// out[m,n] += a[m,k] * b[k,n]
pub(crate) fn mm_nn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = a[i * k + kk];
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// Dot product with eight independent accumulators combined in a fixed
/// order: deterministic, and the independent lanes let the compiler
/// vectorize what a single-accumulator reduction cannot.
#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let ac = &a[c * 8..c * 8 + 8];
        let bc = &b[c * 8..c * 8 + 8];
        for l in 0..8 {
            acc[l] += ac[l] * bc[l];
        }
    }
    let mut tail = 0.0f32;
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    (((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]))) + tail
}

/// out[m,k] += a[m,n] * b[k,n]^T  (dot products of rows)
pub(crate) fn mm_nt(a: &[f32], b: &[f32], m: usize, n: usize, k: usize, out: &mut [f32]) {
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for kk in 0..k {
            let b_row = &b[kk * n..(kk + 1) * n];
            out[i * k + kk] += dot(a_row, b_row);
        }
    }
}

/// out[k,n] += a[m,k]^T * b[m,n]
pub(crate) fn mm_tn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = a[i * k + kk];
            let out_row = &mut out[kk * n..(kk + 1) * n];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

impl Tensor {
    // -- elementwise ------------------------------------------------------

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("add", self, other)?;
        let data = self.with_data(|a| other.with_data(|b| a.iter().zip(b).map(|(x, y)| x + y).collect()));
        let (pa, pb) = (self.clone(), other.clone());
        Tensor::op_result(
            "add",
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                if pa.needs_grad() {
                    pa.accumulate_grad(g);
                }
                if pb.needs_grad() {
                    pb.accumulate_grad(g);
                }
            }),
        )
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("sub", self, other)?;
        let data = self.with_data(|a| other.with_data(|b| a.iter().zip(b).map(|(x, y)| x - y).collect()));
        let (pa, pb) = (self.clone(), other.clone());
        Tensor::op_result(
            "sub",
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                if pa.needs_grad() {
                    pa.accumulate_grad(g);
                }
                if pb.needs_grad() {
                    let neg: Vec<f32> = g.iter().map(|v| -v).collect();
                    pb.accumulate_grad(&neg);
                }
            }),
        )
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("mul", self, other)?;
        let data = self.with_data(|a| other.with_data(|b| a.iter().zip(b).map(|(x, y)| x * y).collect()));
        let (pa, pb) = (self.clone(), other.clone());
        Tensor::op_result(
            "mul",
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                if pa.needs_grad() {
                    let contrib = pb.with_data(|b| g.iter().zip(b).map(|(gi, bi)| gi * bi).collect::<Vec<_>>());
                    pa.accumulate_grad(&contrib);
                }
                if pb.needs_grad() {
                    let contrib = pa.with_data(|a| g.iter().zip(a).map(|(gi, ai)| gi * ai).collect::<Vec<_>>());
                    pb.accumulate_grad(&contrib);
                }
            }),
        )
    }

    pub fn add_scalar(&self, c: f32) -> Result<Tensor> {
        if !c.is_finite() {
            return Err(Error::NonFinite { op: "add_scalar" });
        }
        let data = self.with_data(|a| a.iter().map(|x| x + c).collect());
        let pa = self.clone();
        Tensor::op_result(
            "add_scalar",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g| {
                if pa.needs_grad() {
                    pa.accumulate_grad(g);
                }
            }),
        )
    }

    pub fn mul_scalar(&self, c: f32) -> Result<Tensor> {
        if !c.is_finite() {
            return Err(Error::NonFinite { op: "mul_scalar" });
        }
        let data = self.with_data(|a| a.iter().map(|x| x * c).collect());
        let pa = self.clone();
        Tensor::op_result(
            "mul_scalar",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g| {
                if pa.needs_grad() {
                    let contrib: Vec<f32> = g.iter().map(|v| v * c).collect();
                    pa.accumulate_grad(&contrib);
                }
            }),
        )
    }

    // -- matrix products ---------------------------------------------------

    /// [m,k] x [k,n] -> [m,n]
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                detail: format!("{:?} x {:?}", sa, sb),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut data = vec![0.0f32; m * n];
        self.with_data(|a| other.with_data(|b| mm_nn(a, b, m, k, n, &mut data)));
        let (pa, pb) = (self.clone(), other.clone());
        Tensor::op_result(
            "matmul",
            vec![m, n],
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                if pa.needs_grad() {
                    let mut da = vec![0.0f32; m * k];
                    pb.with_data(|b| mm_nt(g, b, m, n, k, &mut da));
                    pa.accumulate_grad(&da);
                }
                if pb.needs_grad() {
                    let mut db = vec![0.0f32; k * n];
                    pa.with_data(|a| mm_tn(a, g, m, k, n, &mut db));
                    pb.accumulate_grad(&db);
                }
            }),
        )
    }

    /// [B,m,k] x [B,k,n] -> [B,m,n]
    pub fn bmm(&self, other: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::ShapeMismatch {
                op: "bmm",
                detail: format!("{:?} x {:?}", sa, sb),
            });
        }
        let (bsz, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut data = vec![0.0f32; bsz * m * n];
        self.with_data(|a| {
            other.with_data(|b| {
                for i in 0..bsz {
                    mm_nn(
                        &a[i * m * k..(i + 1) * m * k],
                        &b[i * k * n..(i + 1) * k * n],
                        m,
                        k,
                        n,
                        &mut data[i * m * n..(i + 1) * m * n],
                    );
                }
            })
        });
        let (pa, pb) = (self.clone(), other.clone());
        Tensor::op_result(
            "bmm",
            vec![bsz, m, n],
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                if pa.needs_grad() {
                    let mut da = vec![0.0f32; bsz * m * k];
                    pb.with_data(|b| {
                        for i in 0..bsz {
                            mm_nt(
                                &g[i * m * n..(i + 1) * m * n],
                                &b[i * k * n..(i + 1) * k * n],
                                m,
                                n,
                                k,
                                &mut da[i * m * k..(i + 1) * m * k],
                            );
                        }
                    });
                    pa.accumulate_grad(&da);
                }
                if pb.needs_grad() {
                    let mut db = vec![0.0f32; bsz * k * n];
                    pa.with_data(|a| {
                        for i in 0..bsz {
                            mm_tn(
                                &a[i * m * k..(i + 1) * m * k],
                                &g[i * m * n..(i + 1) * m * n],
                                m,
                                k,
                                n,
                                &mut db[i * k * n..(i + 1) * k * n],
                            );
                        }
                    });
                    pb.accumulate_grad(&db);
                }
            }),
        )
    }

    /// Swap the last two axes (copying).
    pub fn transpose_last2(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() < 2 {
            return Err(Error::ShapeMismatch {
                op: "transpose_last2",
                detail: format!("{:?}", s),
            });
        }
        let (m, n) = (s[s.len() - 2], s[s.len() - 1]);
        let batch: usize = s[..s.len() - 2].iter().product();
        let mut out_shape = s.to_vec();
        let l = out_shape.len();
        out_shape.swap(l - 2, l - 1);

        fn transpose_batched(src: &[f32], batch: usize, m: usize, n: usize) -> Vec<f32> {
            let mut out = vec![0.0f32; src.len()];
            for b in 0..batch {
                let o = b * m * n;
                for i in 0..m {
                    for j in 0..n {
                        out[o + j * m + i] = src[o + i * n + j];
                    }
                }
            }
            out
        }

        let data = self.with_data(|a| transpose_batched(a, batch, m, n));
        let pa = self.clone();
        Tensor::op_result(
            "transpose_last2",
            out_shape,
            data,
            vec![self.clone()],
            Box::new(move |g| {
                if pa.needs_grad() {
                    // upstream grad has shape [..., n, m]; transpose back
                    let contrib = transpose_batched(g, batch, n, m);
                    pa.accumulate_grad(&contrib);
                }
            }),
        )
    }

    pub fn reshape(&self, new_shape: &[usize]) -> Result<Tensor> {
        if new_shape.iter().product::<usize>() != self.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                detail: format!("{:?} -> {:?}", self.shape(), new_shape),
            });
        }
        let data = self.to_vec();
        let pa = self.clone();
        Tensor::op_result(
            "reshape",
            new_shape.to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g| {
                if pa.needs_grad() {
                    pa.accumulate_grad(g);
                }
            }),
        )
    }

    // -- embedding lookup --------------------------------------------------

    /// Select rows of a [V,D] table; gradient scatter-adds back by row id.
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "gather_rows",
                detail: format!("table {:?}", s),
            });
        }
        let (v, d) = (s[0], s[1]);
        for &id in ids {
            if id >= v {
                return Err(Error::invalid(format!(
                    "gather_rows: id {id} out of range for table with {v} rows"
                )));
            }
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        self.with_data(|t| {
            for &id in ids {
                data.extend_from_slice(&t[id * d..(id + 1) * d]);
            }
        });
        let pa = self.clone();
        let ids_own: Vec<usize> = ids.to_vec();
        Tensor::op_result(
            "gather_rows",
            vec![ids_own.len(), d],
            data,
            vec![self.clone()],
            Box::new(move |g| {
                if pa.needs_grad() {
                    let mut contrib = vec![0.0f32; v * d];
                    for (row, &id) in ids_own.iter().enumerate() {
                        let src = &g[row * d..(row + 1) * d];
                        let dst = &mut contrib[id * d..(id + 1) * d];
                        for (o, s) in dst.iter_mut().zip(src) {
                            *o += s;
                        }
                    }
                    pa.accumulate_grad(&contrib);
                }
            }),
        )
    }

    // -- convolution -------------------------------------------------------

    /// 2d convolution, NCHW layout, square-ish kernels, zero padding.
    pub fn conv2d(
        &self,
        weight: &Tensor,
        bias: Option<&Tensor>,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor> {
        let xs = self.shape();
        let ws = weight.shape();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                detail: format!("input {:?}, weight {:?}", xs, ws),
            });
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d: stride must be >= 1"));
        }
        let (bn, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (oc, _, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                detail: format!("kernel {kh}x{kw} larger than padded input {h}x{w} (pad {pad})"),
            });
        }
        if let Some(b) = bias {
            if b.shape() != [oc] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d",
                    detail: format!("bias {:?} vs out channels {oc}", b.shape()),
                });
            }
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let patch = oh * ow;
        let k_len = c * kh * kw;

        // col[p, k] layout for one batch item
        let im2col = move |x: &[f32], n: usize, col: &mut [f32]| {
            let base = n * c * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let p = oy * ow + ox;
                    let row = &mut col[p * k_len..(p + 1) * k_len];
                    let mut k = 0;
                    for ci in 0..c {
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                row[k] = if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize
                                {
                                    x[base + (ci * h + iy as usize) * w + ix as usize]
                                } else {
                                    0.0
                                };
                                k += 1;
                            }
                        }
                    }
                }
            }
        };

        let mut data = vec![0.0f32; bn * oc * patch];
        let mut col = vec![0.0f32; patch * k_len];
        self.with_data(|x| {
            weight.with_data(|wt| {
                for n in 0..bn {
                    im2col(x, n, &mut col);
                    // out[oc, patch] = weight[oc, k_len] . col[patch, k_len]^T
                    mm_nt(
                        wt,
                        &col,
                        oc,
                        k_len,
                        patch,
                        &mut data[n * oc * patch..(n + 1) * oc * patch],
                    );
                }
            })
        });
        if let Some(b) = bias {
            b.with_data(|bv| {
                for n in 0..bn {
                    for o in 0..oc {
                        let v = bv[o];
                        for p in &mut data[(n * oc + o) * patch..(n * oc + o + 1) * patch] {
                            *p += v;
                        }
                    }
                }
            });
        }

        let px = self.clone();
        let pw = weight.clone();
        let pb = bias.cloned();
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        Tensor::op_result(
            "conv2d",
            vec![bn, oc, oh, ow],
            data,
            parents,
            Box::new(move |g| {
                let mut col = vec![0.0f32; patch * k_len];
                if pw.needs_grad() {
                    let mut dw = vec![0.0f32; oc * k_len];
                    px.with_data(|x| {
                        for n in 0..bn {
                            im2col(x, n, &mut col);
                            // dW[oc,k] += g_n[oc,patch] . col[patch,k]
                            mm_nn(&g[n * oc * patch..(n + 1) * oc * patch], &col, oc, patch, k_len, &mut dw);
                        }
                    });
                    pw.accumulate_grad(&dw);
                }
                if px.needs_grad() {
                    let mut dx = vec![0.0f32; bn * c * h * w];
                    let mut dcol = vec![0.0f32; patch * k_len];
                    pw.with_data(|wt| {
                        for n in 0..bn {
                            dcol.iter_mut().for_each(|v| *v = 0.0);
                            // dcol[patch,k] = g_n[oc,patch]^T . W[oc,k]
                            mm_tn(&g[n * oc * patch..(n + 1) * oc * patch], wt, oc, patch, k_len, &mut dcol);
                            // col2im scatter-add
                            let base = n * c * h * w;
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    let p = oy * ow + ox;
                                    let row = &dcol[p * k_len..(p + 1) * k_len];
                                    let mut k = 0;
                                    for ci in 0..c {
                                        for ky in 0..kh {
                                            let iy = (oy * stride + ky) as isize - pad as isize;
                                            for kx in 0..kw {
                                                let ix = (ox * stride + kx) as isize - pad as isize;
                                                if iy >= 0
                                                    && iy < h as isize
                                                    && ix >= 0
                                                    && ix < w as isize
                                                {
                                                    dx[base + (ci * h + iy as usize) * w + ix as usize] += row[k];
                                                }
                                                k += 1;
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    });
                    px.accumulate_grad(&dx);
                }
                if let Some(b) = &pb {
                    if b.needs_grad() {
                        let mut db = vec![0.0f32; oc];
                        for n in 0..bn {
                            for o in 0..oc {
                                let mut acc = 0.0f32;
                                for p in 0..patch {
                                    acc += g[(n * oc + o) * patch + p];
                                }
                                db[o] += acc;
                            }
                        }
                        b.accumulate_grad(&db);
                    }
                }
            }),
        )
    }

    /// Nearest-neighbour 2x spatial upsample, NCHW.
    pub fn upsample_nearest2x(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(Error::ShapeMismatch {
                op: "upsample_nearest2x",
                detail: format!("{:?}", s),
            });
        }
        let (bn, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h * 2, w * 2);
        let mut data = vec![0.0f32; bn * c * oh * ow];
        self.with_data(|x| {
            for nc in 0..bn * c {
                let src = &x[nc * h * w..(nc + 1) * h * w];
                let dst = &mut data[nc * oh * ow..(nc + 1) * oh * ow];
                for y in 0..oh {
                    for xcol in 0..ow {
                        dst[y * ow + xcol] = src[(y / 2) * w + xcol / 2];
                    }
                }
            }
        });
        let pa = self.clone();
        Tensor::op_result(
            "upsample_nearest2x",
            vec![bn, c, oh, ow],
            data,
            vec![self.clone()],
            Box::new(move |g| {
                if pa.needs_grad() {
                    let mut dx = vec![0.0f32; bn * c * h * w];
                    for nc in 0..bn * c {
                        let gsrc = &g[nc * oh * ow..(nc + 1) * oh * ow];
                        let dst = &mut dx[nc * h * w..(nc + 1) * h * w];
                        for y in 0..oh {
                            for xcol in 0..ow {
                                dst[(y / 2) * w + xcol / 2] += gsrc[y * ow + xcol];
                            }
                        }
                    }
                    pa.accumulate_grad(&dx);
                }
            }),
        )
    }

    // -- activations -------------------------------------------------------

    pub fn sigmoid(&self) -> Result<Tensor> {
        let data: Vec<f32> = self.with_data(|a| a.iter().map(|x| 1.0 / (1.0 + (-x).exp())).collect());
        let y = data.clone();
        let pa = self.clone();
        Tensor::op_result(
            "sigmoid",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g| {
                if pa.needs_grad() {
                    let contrib: Vec<f32> = g.iter().zip(&y).map(|(gi, yi)| gi * yi * (1.0 - yi)).collect();
                    pa.accumulate_grad(&contrib);
                }
            }),
        )
    }

    pub fn silu(&self) -> Result<Tensor> {
        let sig: Vec<f32> = self.with_data(|a| a.iter().map(|x| 1.0 / (1.0 + (-x).exp())).collect());
        let data: Vec<f32> = self.with_data(|a| a.iter().zip(&sig).map(|(x, s)| x * s).collect());
        let pa = self.clone();
        Tensor::op_result(
            "silu",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g| {
                if pa.needs_grad() {
                    let contrib: Vec<f32> = pa.with_data(|x| {
                        g.iter()
                            .zip(x)
                            .zip(&sig)
                            .map(|((gi, xi), si)| gi * si * (1.0 + xi * (1.0 - si)))
                            .collect()
                    });
                    pa.accumulate_grad(&contrib);
                }
            }),
        )
    }

    /// Gaussian error linear unit, tanh approximation.
    pub fn gelu(&self) -> Result<Tensor> {
        const C: f32 = 0.797_884_56; // sqrt(2/pi)
        const A: f32 = 0.044_715;
        let t: Vec<f32> = self.with_data(|a| {
            a.iter()
                .map(|&x| (C * (x + A * x * x * x)).tanh())
                .collect()
        });
        let data: Vec<f32> = self.with_data(|a| a.iter().zip(&t).map(|(x, ti)| 0.5 * x * (1.0 + ti)).collect());
        let pa = self.clone();
        Tensor::op_result(
            "gelu",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g| {
                if pa.needs_grad() {
                    let contrib: Vec<f32> = pa.with_data(|x| {
                        g.iter()
                            .zip(x)
                            .zip(&t)
                            .map(|((gi, &xi), &ti)| {
                                let du = C * (1.0 + 3.0 * A * xi * xi);
                                gi * (0.5 * (1.0 + ti) + 0.5 * xi * (1.0 - ti * ti) * du)
                            })
                            .collect()
                    });
                    pa.accumulate_grad(&contrib);
                }
            }),
        )
    }

    // -- normalization -----------------------------------------------------

    /// Group normalization over NCHW input with per-channel affine.
    pub fn group_norm(&self, groups: usize, gamma: &Tensor, beta: &Tensor, eps: f32) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(Error::ShapeMismatch {
                op: "group_norm",
                detail: format!("{:?}", s),
            });
        }
        let (bn, c, h, w) = (s[0], s[1], s[2], s[3]);
        if groups == 0 || c % groups != 0 {
            return Err(Error::invalid(format!(
                "group_norm: {c} channels not divisible into {groups} groups"
            )));
        }
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(Error::ShapeMismatch {
                op: "group_norm",
                detail: format!("affine {:?}/{:?} vs {c} channels", gamma.shape(), beta.shape()),
            });
        }
        let cg = c / groups;
        let m = cg * h * w; // elements per group
        let hw = h * w;

        let mut mean = vec![0.0f32; bn * groups];
        let mut rstd = vec![0.0f32; bn * groups];
        let mut data = vec![0.0f32; self.len()];
        self.with_data(|x| {
            gamma.with_data(|ga| {
                beta.with_data(|be| {
                    for n in 0..bn {
                        for g in 0..groups {
                            let start = (n * c + g * cg) * hw;
                            let slice = &x[start..start + m];
                            let mu = slice.iter().sum::<f32>() / m as f32;
                            let var = slice.iter().map(|v| (v - mu) * (v - mu)).sum::<f32>() / m as f32;
                            let r = 1.0 / (var + eps).sqrt();
                            mean[n * groups + g] = mu;
                            rstd[n * groups + g] = r;
                            for ci in 0..cg {
                                let ch = g * cg + ci;
                                let off = (n * c + ch) * hw;
                                for i in 0..hw {
                                    data[off + i] = (x[off + i] - mu) * r * ga[ch] + be[ch];
                                }
                            }
                        }
                    }
                })
            })
        });

        let px = self.clone();
        let pg = gamma.clone();
        let pbeta = beta.clone();
        Tensor::op_result(
            "group_norm",
            s.to_vec(),
            data,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |g| {
                let mut dgamma = vec![0.0f32; c];
                let mut dbeta = vec![0.0f32; c];
                let mut dx = if px.needs_grad() { vec![0.0f32; bn * c * hw] } else { Vec::new() };
                px.with_data(|x| {
                    pg.with_data(|ga| {
                        for n in 0..bn {
                            for gi in 0..groups {
                                let mu = mean[n * groups + gi];
                                let r = rstd[n * groups + gi];
                                // two reductions over the group
                                let mut s1 = 0.0f32; // sum of dyhat
                                let mut s2 = 0.0f32; // sum of dyhat * xhat
                                for ci in 0..cg {
                                    let ch = gi * cg + ci;
                                    let off = (n * c + ch) * hw;
                                    for i in 0..hw {
                                        let up = g[off + i];
                                        let xhat = (x[off + i] - mu) * r;
                                        dgamma[ch] += up * xhat;
                                        dbeta[ch] += up;
                                        let dyhat = up * ga[ch];
                                        s1 += dyhat;
                                        s2 += dyhat * xhat;
                                    }
                                }
                                if px.needs_grad() {
                                    let inv_m = 1.0 / m as f32;
                                    for ci in 0..cg {
                                        let ch = gi * cg + ci;
                                        let off = (n * c + ch) * hw;
                                        for i in 0..hw {
                                            let xhat = (x[off + i] - mu) * r;
                                            let dyhat = g[off + i] * ga[ch];
                                            dx[off + i] = r * (dyhat - s1 * inv_m - xhat * s2 * inv_m);
                                        }
                                    }
                                }
                            }
                        }
                    })
                });
                if px.needs_grad() {
                    px.accumulate_grad(&dx);
                }
                if pg.needs_grad() {
                    pg.accumulate_grad(&dgamma);
                }
                if pbeta.needs_grad() {
                    pbeta.accumulate_grad(&dbeta);
                }
            }),
        )
    }

    /// Layer normalization over the last axis with affine parameters.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f32) -> Result<Tensor> {
        let s = self.shape();
        let d = *s.last().ok_or_else(|| Error::invalid("layer_norm on 0-d tensor"))?;
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                detail: format!("affine {:?}/{:?} vs width {d}", gamma.shape(), beta.shape()),
            });
        }
        let rows = self.len() / d;
        let mut mean = vec![0.0f32; rows];
        let mut rstd = vec![0.0f32; rows];
        let mut data = vec![0.0f32; self.len()];
        self.with_data(|x| {
            gamma.with_data(|ga| {
                beta.with_data(|be| {
                    for r in 0..rows {
                        let row = &x[r * d..(r + 1) * d];
                        let mu = row.iter().sum::<f32>() / d as f32;
                        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f32>() / d as f32;
                        let rs = 1.0 / (var + eps).sqrt();
                        mean[r] = mu;
                        rstd[r] = rs;
                        for i in 0..d {
                            data[r * d + i] = (row[i] - mu) * rs * ga[i] + be[i];
                        }
                    }
                })
            })
        });
        let px = self.clone();
        let pg = gamma.clone();
        let pbeta = beta.clone();
        Tensor::op_result(
            "layer_norm",
            s.to_vec(),
            data,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |g| {
                let mut dgamma = vec![0.0f32; d];
                let mut dbeta = vec![0.0f32; d];
                let mut dx = if px.needs_grad() { vec![0.0f32; rows * d] } else { Vec::new() };
                px.with_data(|x| {
                    pg.with_data(|ga| {
                        for r in 0..rows {
                            let mu = mean[r];
                            let rs = rstd[r];
                            let mut s1 = 0.0f32;
                            let mut s2 = 0.0f32;
                            for i in 0..d {
                                let up = g[r * d + i];
                                let xhat = (x[r * d + i] - mu) * rs;
                                dgamma[i] += up * xhat;
                                dbeta[i] += up;
                                let dyhat = up * ga[i];
                                s1 += dyhat;
                                s2 += dyhat * xhat;
                            }
                            if px.needs_grad() {
                                let inv_d = 1.0 / d as f32;
                                for i in 0..d {
                                    let xhat = (x[r * d + i] - mu) * rs;
                                    let dyhat = g[r * d + i] * ga[i];
                                    dx[r * d + i] = rs * (dyhat - s1 * inv_d - xhat * s2 * inv_d);
                                }
                            }
                        }
                    })
                });
                if px.needs_grad() {
                    px.accumulate_grad(&dx);
                }
                if pg.needs_grad() {
                    pg.accumulate_grad(&dgamma);
                }
                if pbeta.needs_grad() {
                    pbeta.accumulate_grad(&dbeta);
                }
            }),
        )
    }

    // -- reductions & row ops ----------------------------------------------

    pub fn softmax_lastdim(&self) -> Result<Tensor> {
        let s = self.shape();
        let d = *s.last().ok_or_else(|| Error::invalid("softmax on 0-d tensor"))?;
        let rows = self.len() / d;
        let mut data = vec![0.0f32; self.len()];
        self.with_data(|x| {
            for r in 0..rows {
                let row = &x[r * d..(r + 1) * d];
                let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                let mut denom = 0.0f32;
                for i in 0..d {
                    let e = (row[i] - mx).exp();
                    data[r * d + i] = e;
                    denom += e;
                }
                for i in 0..d {
                    data[r * d + i] /= denom;
                }
            }
        });
        let y = data.clone();
        let pa = self.clone();
        Tensor::op_result(
            "softmax_lastdim",
            s.to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g| {
                if pa.needs_grad() {
                    let mut dx = vec![0.0f32; rows * d];
                    for r in 0..rows {
                        let yr = &y[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let dot: f32 = yr.iter().zip(gr).map(|(yi, gi)| yi * gi).sum();
                        for i in 0..d {
                            dx[r * d + i] = yr[i] * (gr[i] - dot);
                        }
                    }
                    pa.accumulate_grad(&dx);
                }
            }),
        )
    }

    /// Mean of all elements -> scalar [1].
    pub fn mean_all(&self) -> Result<Tensor> {
        let n = self.len();
        if n == 0 {
            return Err(Error::invalid("mean_all of empty tensor"));
        }
        let total: f32 = self.with_data(|a| a.iter().sum());
        let pa = self.clone();
        Tensor::op_result(
            "mean_all",
            vec![1],
            vec![total / n as f32],
            vec![self.clone()],
            Box::new(move |g| {
                if pa.needs_grad() {
                    let v = g[0] / n as f32;
                    pa.accumulate_grad(&vec![v; n]);
                }
            }),
        )
    }

    /// Softmax cross-entropy against integer targets, averaged over rows.
    pub fn cross_entropy_mean(&self, targets: &[usize]) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy_mean",
                detail: format!("logits {:?} vs {} targets", s, targets.len()),
            });
        }
        let (b, c) = (s[0], s[1]);
        for &t in targets {
            if t >= c {
                return Err(Error::invalid(format!(
                    "cross_entropy_mean: target {t} out of range {c}"
                )));
            }
        }
        let mut probs = vec![0.0f32; b * c];
        let mut loss = 0.0f64;
        self.with_data(|z| {
            for r in 0..b {
                let row = &z[r * c..(r + 1) * c];
                let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                let mut denom = 0.0f32;
                for i in 0..c {
                    let e = (row[i] - mx).exp();
                    probs[r * c + i] = e;
                    denom += e;
                }
                for i in 0..c {
                    probs[r * c + i] /= denom;
                }
                let lse = denom.ln() + mx;
                loss += (lse - row[targets[r]]) as f64;
            }
        });
        let pa = self.clone();
        let targets_own: Vec<usize> = targets.to_vec();
        Tensor::op_result(
            "cross_entropy_mean",
            vec![1],
            vec![(loss / b as f64) as f32],
            vec![self.clone()],
            Box::new(move |g| {
                if pa.needs_grad() {
                    let scale = g[0] / b as f32;
                    let mut dz = vec![0.0f32; b * c];
                    for r in 0..b {
                        for i in 0..c {
                            let ind = if i == targets_own[r] { 1.0 } else { 0.0 };
                            dz[r * c + i] = (probs[r * c + i] - ind) * scale;
                        }
                    }
                    pa.accumulate_grad(&dz);
                }
            }),
        )
    }

    /// Normalize each row of the trailing axis to unit L2 norm.
    pub fn l2_normalize_rows(&self) -> Result<Tensor> {
        const EPS: f32 = 1e-12;
        let s = self.shape();
        let d = *s.last().ok_or_else(|| Error::invalid("l2_normalize on 0-d tensor"))?;
        let rows = self.len() / d;
        let mut norms = vec![0.0f32; rows];
        let mut data = vec![0.0f32; self.len()];
        self.with_data(|x| {
            for r in 0..rows {
                let row = &x[r * d..(r + 1) * d];
                let nsq: f32 = row.iter().map(|v| v * v).sum();
                let n = nsq.sqrt().max(EPS);
                norms[r] = n;
                for i in 0..d {
                    data[r * d + i] = row[i] / n;
                }
            }
        });
        let y = data.clone();
        let pa = self.clone();
        Tensor::op_result(
            "l2_normalize_rows",
            s.to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g| {
                if pa.needs_grad() {
                    let mut dx = vec![0.0f32; rows * d];
                    for r in 0..rows {
                        let yr = &y[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let dot: f32 = yr.iter().zip(gr).map(|(yi, gi)| yi * gi).sum();
                        let n = norms[r];
                        for i in 0..d {
                            dx[r * d + i] = (gr[i] - yr[i] * dot) / n;
                        }
                    }
                    pa.accumulate_grad(&dx);
                }
            }),
        )
    }

    // -- broadcast adds ----------------------------------------------------

    /// self [B, rest..] + other [rest..] (same added to every batch item).
    pub fn add_broadcast0(&self, other: &Tensor) -> Result<Tensor> {
        let s = self.shape();
        if s.len() < 2 || &s[1..] != other.shape() {
            return Err(Error::ShapeMismatch {
                op: "add_broadcast0",
                detail: format!("{:?} + {:?}", s, other.shape()),
            });
        }
        let b = s[0];
        let rest = other.len();
        let data = self.with_data(|x| {
            other.with_data(|p| {
                let mut out = vec![0.0f32; x.len()];
                for bi in 0..b {
                    for i in 0..rest {
                        out[bi * rest + i] = x[bi * rest + i] + p[i];
                    }
                }
                out
            })
        });
        let (pa, pb) = (self.clone(), other.clone());
        Tensor::op_result(
            "add_broadcast0",
            s.to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                if pa.needs_grad() {
                    pa.accumulate_grad(g);
                }
                if pb.needs_grad() {
                    let mut dp = vec![0.0f32; rest];
                    for bi in 0..b {
                        for i in 0..rest {
                            dp[i] += g[bi * rest + i];
                        }
                    }
                    pb.accumulate_grad(&dp);
                }
            }),
        )
    }

    /// self [N,C,H,W] + other [N,C] broadcast over the spatial axes.
    pub fn add_chan_batched(&self, other: &Tensor) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 4 || other.shape() != [s[0], s[1]] {
            return Err(Error::ShapeMismatch {
                op: "add_chan_batched",
                detail: format!("{:?} + {:?}", s, other.shape()),
            });
        }
        let (bn, c, h, w) = (s[0], s[1], s[2], s[3]);
        let hw = h * w;
        let data = self.with_data(|x| {
            other.with_data(|t| {
                let mut out = vec![0.0f32; x.len()];
                for nc in 0..bn * c {
                    let v = t[nc];
                    for i in 0..hw {
                        out[nc * hw + i] = x[nc * hw + i] + v;
                    }
                }
                out
            })
        });
        let (pa, pb) = (self.clone(), other.clone());
        Tensor::op_result(
            "add_chan_batched",
            s.to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                if pa.needs_grad() {
                    pa.accumulate_grad(g);
                }
                if pb.needs_grad() {
                    let mut dt = vec![0.0f32; bn * c];
                    for nc in 0..bn * c {
                        let mut acc = 0.0f32;
                        for i in 0..hw {
                            acc += g[nc * hw + i];
                        }
                        dt[nc] = acc;
                    }
                    pb.accumulate_grad(&dt);
                }
            }),
        )
    }
}

// ---------------------------------------------------------------------------
// Free functions over several tensors
// ---------------------------------------------------------------------------

/// Concatenate along axis 0; trailing dims must agree.
pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::invalid("concat_rows of zero tensors"));
    }
    let tail = &parts[0].shape()[1..];
    let mut rows = 0;
    for p in parts {
        if p.shape().is_empty() || &p.shape()[1..] != tail {
            return Err(Error::ShapeMismatch {
                op: "concat_rows",
                detail: format!("{:?} vs [_, {:?}]", p.shape(), tail),
            });
        }
        rows += p.shape()[0];
    }
    let mut shape = vec![rows];
    shape.extend_from_slice(tail);
    let mut data = Vec::with_capacity(shape.iter().product());
    for p in parts {
        p.with_data(|d| data.extend_from_slice(d));
    }
    let owned: Vec<Tensor> = parts.iter().map(|p| (*p).clone()).collect();
    let owned_for_back = owned.clone();
    Tensor::op_result(
        "concat_rows",
        shape,
        data,
        owned,
        Box::new(move |g| {
            let mut off = 0;
            for p in &owned_for_back {
                let n = p.len();
                if p.needs_grad() {
                    p.accumulate_grad(&g[off..off + n]);
                }
                off += n;
            }
        }),
    )
}

/// Stack equal-shape tensors along a new leading axis.
pub fn stack(parts: &[&Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::invalid("stack of zero tensors"));
    }
    let inner = parts[0].shape().to_vec();
    for p in parts {
        if p.shape() != inner {
            return Err(Error::ShapeMismatch {
                op: "stack",
                detail: format!("{:?} vs {:?}", p.shape(), inner),
            });
        }
    }
    let mut shape = vec![parts.len()];
    shape.extend_from_slice(&inner);
    let mut data = Vec::with_capacity(shape.iter().product());
    for p in parts {
        p.with_data(|d| data.extend_from_slice(d));
    }
    let owned: Vec<Tensor> = parts.iter().map(|p| (*p).clone()).collect();
    let owned_for_back = owned.clone();
    Tensor::op_result(
        "stack",
        shape,
        data,
        owned,
        Box::new(move |g| {
            let mut off = 0;
            for p in &owned_for_back {
                let n = p.len();
                if p.needs_grad() {
                    p.accumulate_grad(&g[off..off + n]);
                }
                off += n;
            }
        }),
    )
}

/// Concatenate two NCHW tensors along the channel axis.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 4
        || sb.len() != 4
        || sa[0] != sb[0]
        || sa[2] != sb[2]
        || sa[3] != sb[3]
    {
        return Err(Error::ShapeMismatch {
            op: "concat_channels",
            detail: format!("{:?} | {:?}", sa, sb),
        });
    }
    let (bn, c1, c2, hw) = (sa[0], sa[1], sb[1], sa[2] * sa[3]);
    let mut data = Vec::with_capacity(bn * (c1 + c2) * hw);
    a.with_data(|av| {
        b.with_data(|bv| {
            for n in 0..bn {
                data.extend_from_slice(&av[n * c1 * hw..(n + 1) * c1 * hw]);
                data.extend_from_slice(&bv[n * c2 * hw..(n + 1) * c2 * hw]);
            }
        })
    });
    let (pa, pb) = (a.clone(), b.clone());
    Tensor::op_result(
        "concat_channels",
        vec![bn, c1 + c2, sa[2], sa[3]],
        data,
        vec![a.clone(), b.clone()],
        Box::new(move |g| {
            let stride = (c1 + c2) * hw;
            if pa.needs_grad() {
                let mut da = vec![0.0f32; bn * c1 * hw];
                for n in 0..bn {
                    da[n * c1 * hw..(n + 1) * c1 * hw]
                        .copy_from_slice(&g[n * stride..n * stride + c1 * hw]);
                }
                pa.accumulate_grad(&da);
            }
            if pb.needs_grad() {
                let mut db = vec![0.0f32; bn * c2 * hw];
                for n in 0..bn {
                    db[n * c2 * hw..(n + 1) * c2 * hw]
                        .copy_from_slice(&g[n * stride + c1 * hw..(n + 1) * stride]);
                }
                pb.accumulate_grad(&db);
            }
        }),
    )
}

/// Mean squared error between two equal-shape tensors -> scalar.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let d = a.sub(b)?;
    d.mul(&d)?.mean_all()
}
