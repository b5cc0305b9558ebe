//! Independent gradient oracle for the autodiff engine.
//!
//! Every differentiable op has a second, forward-only implementation here
//! written in f64 from the mathematical definition (direct convolution
//! instead of im2col, ijk matmul instead of ikj, and so on). A probe loss
//! — the mean of the op output times fixed random weights — is evaluated
//! through both implementations; central finite differences on the f64
//! shadow (h = 1e-3) are compared element-by-element against the engine's
//! reverse-mode gradients. Using f64 for the difference quotient keeps the
//! oracle's own noise orders of magnitude below the 1e-3 relative
//! tolerance, which raw f32 differences at that step size cannot do.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::nn::Params;
use crate::ops;
use crate::rng;
use crate::tensor::Tensor;

const H: f64 = 1e-3;
const REL_TOL: f64 = 1e-3;
const FWD_TOL: f64 = 1e-4;
/// Forward-agreement floor for single shallow ops: near-zero outputs are
/// compared at an absolute FWD_TOL * 1e-3.
const FWD_FLOOR_SHALLOW: f64 = 1e-3;
/// Floor for the deep composite checks (full text-encoder pipelines).
/// Their outputs are layer-normed to unit scale, but f32 round-off
/// accumulated over dozens of chained ops legitimately exceeds the
/// shallow floor on near-zero elements; the gradient comparison itself
/// stays at REL_TOL against finite differences.
const FWD_FLOOR_COMPOSITE: f64 = 1.0;

// ---------------------------------------------------------------------------
// f64 shadow values and ops
// ---------------------------------------------------------------------------

#[derive(Clone)]
pub struct V {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl V {
    fn new(shape: &[usize], data: Vec<f64>) -> V {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        V {
            shape: shape.to_vec(),
            data,
        }
    }
}

fn s_zip(a: &V, b: &V, f: impl Fn(f64, f64) -> f64) -> V {
    V::new(
        &a.shape,
        a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    )
}

fn s_map(a: &V, f: impl Fn(f64) -> f64) -> V {
    V::new(&a.shape, a.data.iter().map(|&x| f(x)).collect())
}

fn s_add(a: &V, b: &V) -> V {
    s_zip(a, b, |x, y| x + y)
}
fn s_sub(a: &V, b: &V) -> V {
    s_zip(a, b, |x, y| x - y)
}
fn s_mul(a: &V, b: &V) -> V {
    s_zip(a, b, |x, y| x * y)
}

fn s_matmul(a: &V, b: &V) -> V {
    let (m, k) = (a.shape[0], a.shape[1]);
    let n = b.shape[1];
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for kk in 0..k {
                acc += a.data[i * k + kk] * b.data[kk * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    V::new(&[m, n], out)
}

fn s_bmm(a: &V, b: &V) -> V {
    let (bs, m, k) = (a.shape[0], a.shape[1], a.shape[2]);
    let n = b.shape[2];
    let mut out = vec![0.0; bs * m * n];
    for bi in 0..bs {
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for kk in 0..k {
                    acc += a.data[(bi * m + i) * k + kk] * b.data[(bi * k + kk) * n + j];
                }
                out[(bi * m + i) * n + j] = acc;
            }
        }
    }
    V::new(&[bs, m, n], out)
}

fn s_transpose_last2(a: &V) -> V {
    let nd = a.shape.len();
    let (m, n) = (a.shape[nd - 2], a.shape[nd - 1]);
    let batch: usize = a.shape[..nd - 2].iter().product();
    let mut shape = a.shape.clone();
    shape.swap(nd - 2, nd - 1);
    let mut out = vec![0.0; a.data.len()];
    for b in 0..batch {
        for i in 0..m {
            for j in 0..n {
                out[b * m * n + j * m + i] = a.data[b * m * n + i * n + j];
            }
        }
    }
    V::new(&shape, out)
}

fn s_gather_rows(t: &V, ids: &[usize]) -> V {
    let d = t.shape[1];
    let mut out = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        out.extend_from_slice(&t.data[id * d..(id + 1) * d]);
    }
    V::new(&[ids.len(), d], out)
}

/// Direct (non-im2col) convolution from the definition.
fn s_conv2d(x: &V, w: &V, b: Option<&V>, stride: usize, pad: usize) -> V {
    let (bn, c, h, wd) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (oc, _, kh, kw) = (w.shape[0], w.shape[1], w.shape[2], w.shape[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; bn * oc * oh * ow];
    for n in 0..bn {
        for o in 0..oc {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.map_or(0.0, |bv| bv.data[o]);
                    for ci in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && iy < h as isize && ix >= 0 && ix < wd as isize {
                                    acc += x.data
                                        [((n * c + ci) * h + iy as usize) * wd + ix as usize]
                                        * w.data[((o * c + ci) * kh + ky) * kw + kx];
                                }
                            }
                        }
                    }
                    out[((n * oc + o) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    V::new(&[bn, oc, oh, ow], out)
}

fn s_upsample2x(x: &V) -> V {
    let (bn, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let mut out = vec![0.0; bn * c * 4 * h * w];
    for nc in 0..bn * c {
        for y in 0..2 * h {
            for xx in 0..2 * w {
                out[nc * 4 * h * w + y * 2 * w + xx] = x.data[nc * h * w + (y / 2) * w + xx / 2];
            }
        }
    }
    V::new(&[bn, c, 2 * h, 2 * w], out)
}

fn s_sigmoid(x: &V) -> V {
    s_map(x, |v| 1.0 / (1.0 + (-v).exp()))
}
fn s_silu(x: &V) -> V {
    s_map(x, |v| v / (1.0 + (-v).exp()))
}
fn s_gelu(x: &V) -> V {
    s_map(x, |v| {
        0.5 * v * (1.0 + (0.797_884_56 * (v + 0.044_715 * v * v * v)).tanh())
    })
}

fn s_group_norm(x: &V, groups: usize, gamma: &V, beta: &V, eps: f64) -> V {
    let (bn, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let cg = c / groups;
    let m = (cg * h * w) as f64;
    let hw = h * w;
    let mut out = vec![0.0; x.data.len()];
    for n in 0..bn {
        for g in 0..groups {
            let start = (n * c + g * cg) * hw;
            let slice = &x.data[start..start + cg * hw];
            let mu = slice.iter().sum::<f64>() / m;
            let var = slice.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / m;
            let r = 1.0 / (var + eps).sqrt();
            for ci in 0..cg {
                let ch = g * cg + ci;
                for i in 0..hw {
                    let idx = (n * c + ch) * hw + i;
                    out[idx] = (x.data[idx] - mu) * r * gamma.data[ch] + beta.data[ch];
                }
            }
        }
    }
    V::new(&x.shape, out)
}

fn s_layer_norm(x: &V, gamma: &V, beta: &V, eps: f64) -> V {
    let d = *x.shape.last().unwrap();
    let rows = x.data.len() / d;
    let mut out = vec![0.0; x.data.len()];
    for r in 0..rows {
        let row = &x.data[r * d..(r + 1) * d];
        let mu = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + eps).sqrt();
        for i in 0..d {
            out[r * d + i] = (row[i] - mu) * rs * gamma.data[i] + beta.data[i];
        }
    }
    V::new(&x.shape, out)
}

fn s_softmax_last(x: &V) -> V {
    let d = *x.shape.last().unwrap();
    let rows = x.data.len() / d;
    let mut out = vec![0.0; x.data.len()];
    for r in 0..rows {
        let row = &x.data[r * d..(r + 1) * d];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for i in 0..d {
            out[r * d + i] = (row[i] - mx).exp();
            denom += out[r * d + i];
        }
        for i in 0..d {
            out[r * d + i] /= denom;
        }
    }
    V::new(&x.shape, out)
}

fn s_mean_all(x: &V) -> V {
    V::new(&[1], vec![x.data.iter().sum::<f64>() / x.data.len() as f64])
}

fn s_cross_entropy_mean(z: &V, targets: &[usize]) -> V {
    let (b, c) = (z.shape[0], z.shape[1]);
    let mut loss = 0.0;
    for r in 0..b {
        let row = &z.data[r * c..(r + 1) * c];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln() + mx;
        loss += lse - row[targets[r]];
    }
    V::new(&[1], vec![loss / b as f64])
}

fn s_l2_normalize_rows(x: &V) -> V {
    let d = *x.shape.last().unwrap();
    let rows = x.data.len() / d;
    let mut out = vec![0.0; x.data.len()];
    for r in 0..rows {
        let row = &x.data[r * d..(r + 1) * d];
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        for i in 0..d {
            out[r * d + i] = row[i] / n;
        }
    }
    V::new(&x.shape, out)
}

fn s_add_broadcast0(x: &V, p: &V) -> V {
    let rest = p.data.len();
    let b = x.data.len() / rest;
    let mut out = vec![0.0; x.data.len()];
    for bi in 0..b {
        for i in 0..rest {
            out[bi * rest + i] = x.data[bi * rest + i] + p.data[i];
        }
    }
    V::new(&x.shape, out)
}

fn s_add_chan_batched(x: &V, t: &V) -> V {
    let (bn, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let hw = h * w;
    let mut out = vec![0.0; x.data.len()];
    for nc in 0..bn * c {
        for i in 0..hw {
            out[nc * hw + i] = x.data[nc * hw + i] + t.data[nc];
        }
    }
    V::new(&x.shape, out)
}

fn s_concat_rows(parts: &[&V]) -> V {
    let tail: usize = parts[0].shape[1..].iter().product();
    let rows: usize = parts.iter().map(|p| p.shape[0]).sum();
    let mut shape = vec![rows];
    shape.extend_from_slice(&parts[0].shape[1..]);
    let mut data = Vec::with_capacity(rows * tail);
    for p in parts {
        data.extend_from_slice(&p.data);
    }
    V::new(&shape, data)
}

fn s_stack(parts: &[&V]) -> V {
    let mut shape = vec![parts.len()];
    shape.extend_from_slice(&parts[0].shape);
    let mut data = Vec::new();
    for p in parts {
        data.extend_from_slice(&p.data);
    }
    V::new(&shape, data)
}

fn s_concat_channels(a: &V, b: &V) -> V {
    let (bn, c1, c2, hw) = (
        a.shape[0],
        a.shape[1],
        b.shape[1],
        a.shape[2] * a.shape[3],
    );
    let mut data = Vec::with_capacity(bn * (c1 + c2) * hw);
    for n in 0..bn {
        data.extend_from_slice(&a.data[n * c1 * hw..(n + 1) * c1 * hw]);
        data.extend_from_slice(&b.data[n * c2 * hw..(n + 1) * c2 * hw]);
    }
    V::new(&[bn, c1 + c2, a.shape[2], a.shape[3]], data)
}

// ---------------------------------------------------------------------------
// Case harness
// ---------------------------------------------------------------------------

struct Input {
    shape: Vec<usize>,
    data: Vec<f32>,
    diff: bool,
}

struct OpCase {
    inputs: Vec<Input>,
    run32: Box<dyn Fn(&[Tensor]) -> Result<Tensor>>,
    run64: Box<dyn Fn(&[V]) -> V>,
}

#[derive(Debug, Clone)]
pub struct GradReport {
    pub op: String,
    pub cases: usize,
    pub elements_checked: usize,
    pub max_rel_err: f64,
}

fn randn_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn d(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.gen_range(lo..=hi)
}

fn check_op(
    op: &'static str,
    cases: usize,
    seed: u64,
    gen: &dyn Fn(&mut ChaCha8Rng) -> OpCase,
) -> Result<GradReport> {
    check_op_floor(op, cases, seed, gen, FWD_FLOOR_SHALLOW)
}

fn check_op_floor(
    op: &'static str,
    cases: usize,
    seed: u64,
    gen: &dyn Fn(&mut ChaCha8Rng) -> OpCase,
    fwd_floor: f64,
) -> Result<GradReport> {
    let mut max_rel = 0.0f64;
    let mut elements = 0usize;
    for case_i in 0..cases {
        let mut rng = rng::stream(seed, op, case_i as u64);
        let case = gen(&mut rng);
        let tensors: Vec<Tensor> = case
            .inputs
            .iter()
            .map(|inp| Tensor::from_vec(&inp.shape, inp.data.clone(), inp.diff))
            .collect::<Result<_>>()?;
        let shadows: Vec<V> = case
            .inputs
            .iter()
            .map(|inp| V::new(&inp.shape, inp.data.iter().map(|&x| x as f64).collect()))
            .collect();

        let y32 = (case.run32)(&tensors)?;
        let y64 = (case.run64)(&shadows);
        if y32.shape() != y64.shape.as_slice() {
            return Err(Error::invalid(format!(
                "{op} case {case_i}: engine shape {:?} vs shadow {:?}",
                y32.shape(),
                y64.shape
            )));
        }
        let y32v = y32.to_vec();
        for (i, (&a, &b)) in y32v.iter().zip(&y64.data).enumerate() {
            let rel = (a as f64 - b).abs() / (a as f64).abs().max(b.abs()).max(fwd_floor);
            if rel > FWD_TOL {
                return Err(Error::invalid(format!(
                    "{op} case {case_i}: forward element {i} engine {a} vs shadow {b} (rel {rel:.2e})"
                )));
            }
        }

        // probe loss: mean(output * fixed random weights)
        let n_out = y64.data.len();
        let w: Vec<f32> = randn_vec(&mut rng, n_out);
        let w_t = Tensor::from_vec(y32.shape(), w.clone(), false)?;
        let loss = y32.mul(&w_t)?.mean_all()?;
        loss.backward()?;
        let probe = |y: &V| -> f64 {
            y.data
                .iter()
                .zip(&w)
                .map(|(&yi, &wi)| yi * wi as f64)
                .sum::<f64>()
                / n_out as f64
        };

        // forward values must be untouched by the backward sweep
        let y32_after = y32.to_vec();
        if y32v != y32_after {
            return Err(Error::invalid(format!(
                "{op} case {case_i}: backward mutated forward values"
            )));
        }

        for (j, inp) in case.inputs.iter().enumerate() {
            if !inp.diff {
                continue;
            }
            let ad = tensors[j].grad_or_zeros();
            for e in 0..inp.data.len() {
                let mut plus = shadows.clone();
                plus[j].data[e] += H;
                let lp = probe(&(case.run64)(&plus));
                let mut minus = shadows.clone();
                minus[j].data[e] -= H;
                let lm = probe(&(case.run64)(&minus));
                let fd = (lp - lm) / (2.0 * H);
                let a = ad[e] as f64;
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-3);
                if rel > REL_TOL {
                    return Err(Error::invalid(format!(
                        "{op} case {case_i}: input {j} element {e}: autodiff {a:.6e} vs finite-diff {fd:.6e} (rel {rel:.2e})"
                    )));
                }
                max_rel = max_rel.max(rel);
                elements += 1;
            }
        }
    }
    Ok(GradReport {
        op: op.to_string(),
        cases,
        elements_checked: elements,
        max_rel_err: max_rel,
    })
}

fn inp(rng: &mut ChaCha8Rng, shape: &[usize], diff: bool) -> Input {
    let n = shape.iter().product();
    Input {
        shape: shape.to_vec(),
        data: randn_vec(rng, n),
        diff,
    }
}

// ---------------------------------------------------------------------------
// Per-op case generators
// ---------------------------------------------------------------------------

fn case_add(rng: &mut ChaCha8Rng) -> OpCase {
    let s = [d(rng, 1, 4), d(rng, 1, 5)];
    OpCase {
        inputs: vec![inp(rng, &s, true), inp(rng, &s, true)],
        run32: Box::new(|t| t[0].add(&t[1])),
        run64: Box::new(|v| s_add(&v[0], &v[1])),
    }
}

fn case_sub(rng: &mut ChaCha8Rng) -> OpCase {
    let s = [d(rng, 1, 4), d(rng, 1, 5)];
    OpCase {
        inputs: vec![inp(rng, &s, true), inp(rng, &s, true)],
        run32: Box::new(|t| t[0].sub(&t[1])),
        run64: Box::new(|v| s_sub(&v[0], &v[1])),
    }
}

fn case_mul(rng: &mut ChaCha8Rng) -> OpCase {
    let s = [d(rng, 1, 4), d(rng, 1, 5)];
    OpCase {
        inputs: vec![inp(rng, &s, true), inp(rng, &s, true)],
        run32: Box::new(|t| t[0].mul(&t[1])),
        run64: Box::new(|v| s_mul(&v[0], &v[1])),
    }
}

fn case_add_scalar(rng: &mut ChaCha8Rng) -> OpCase {
    let s = [d(rng, 1, 4), d(rng, 1, 5)];
    let c: f32 = rng.sample(StandardNormal);
    OpCase {
        inputs: vec![inp(rng, &s, true)],
        run32: Box::new(move |t| t[0].add_scalar(c)),
        run64: Box::new(move |v| s_map(&v[0], |x| x + c as f64)),
    }
}

fn case_mul_scalar(rng: &mut ChaCha8Rng) -> OpCase {
    let s = [d(rng, 1, 4), d(rng, 1, 5)];
    let c: f32 = rng.sample(StandardNormal);
    OpCase {
        inputs: vec![inp(rng, &s, true)],
        run32: Box::new(move |t| t[0].mul_scalar(c)),
        run64: Box::new(move |v| s_map(&v[0], |x| x * c as f64)),
    }
}

fn case_matmul(rng: &mut ChaCha8Rng) -> OpCase {
    let (m, k, n) = (d(rng, 1, 5), d(rng, 1, 5), d(rng, 1, 5));
    OpCase {
        inputs: vec![inp(rng, &[m, k], true), inp(rng, &[k, n], true)],
        run32: Box::new(|t| t[0].matmul(&t[1])),
        run64: Box::new(|v| s_matmul(&v[0], &v[1])),
    }
}

fn case_bmm(rng: &mut ChaCha8Rng) -> OpCase {
    let (b, m, k, n) = (d(rng, 1, 3), d(rng, 1, 4), d(rng, 1, 4), d(rng, 1, 4));
    OpCase {
        inputs: vec![inp(rng, &[b, m, k], true), inp(rng, &[b, k, n], true)],
        run32: Box::new(|t| t[0].bmm(&t[1])),
        run64: Box::new(|v| s_bmm(&v[0], &v[1])),
    }
}

fn case_transpose(rng: &mut ChaCha8Rng) -> OpCase {
    let s = [d(rng, 1, 3), d(rng, 1, 4), d(rng, 1, 4)];
    OpCase {
        inputs: vec![inp(rng, &s, true)],
        run32: Box::new(|t| t[0].transpose_last2()),
        run64: Box::new(|v| s_transpose_last2(&v[0])),
    }
}

fn case_reshape(rng: &mut ChaCha8Rng) -> OpCase {
    let (a, b) = (d(rng, 1, 4), d(rng, 1, 5));
    OpCase {
        inputs: vec![inp(rng, &[a, b], true)],
        run32: Box::new(move |t| t[0].reshape(&[t[0].len()])),
        run64: Box::new(|v| V::new(&[v[0].data.len()], v[0].data.clone())),
    }
}

fn case_gather(rng: &mut ChaCha8Rng) -> OpCase {
    let (v, dd, l) = (d(rng, 3, 7), d(rng, 2, 5), d(rng, 2, 6));
    let ids: Vec<usize> = (0..l).map(|_| rng.gen_range(0..v)).collect();
    let ids2 = ids.clone();
    OpCase {
        inputs: vec![inp(rng, &[v, dd], true)],
        run32: Box::new(move |t| t[0].gather_rows(&ids)),
        run64: Box::new(move |vv| s_gather_rows(&vv[0], &ids2)),
    }
}

fn case_conv2d(rng: &mut ChaCha8Rng) -> OpCase {
    let (bn, c, oc) = (d(rng, 1, 2), d(rng, 1, 3), d(rng, 1, 3));
    let k = if rng.gen_bool(0.5) { 3 } else { 1 };
    let stride = if rng.gen_bool(0.5) { 1 } else { 2 };
    let pad = if k == 3 { d(rng, 0, 1) } else { 0 };
    let h = d(rng, 4, 6);
    let w = d(rng, 4, 6);
    OpCase {
        inputs: vec![
            inp(rng, &[bn, c, h, w], true),
            inp(rng, &[oc, c, k, k], true),
            inp(rng, &[oc], true),
        ],
        run32: Box::new(move |t| t[0].conv2d(&t[1], Some(&t[2]), stride, pad)),
        run64: Box::new(move |v| s_conv2d(&v[0], &v[1], Some(&v[2]), stride, pad)),
    }
}

fn case_upsample(rng: &mut ChaCha8Rng) -> OpCase {
    let s = [d(rng, 1, 2), d(rng, 1, 3), d(rng, 2, 4), d(rng, 2, 4)];
    OpCase {
        inputs: vec![inp(rng, &s, true)],
        run32: Box::new(|t| t[0].upsample_nearest2x()),
        run64: Box::new(|v| s_upsample2x(&v[0])),
    }
}

fn case_sigmoid(rng: &mut ChaCha8Rng) -> OpCase {
    let s = [d(rng, 1, 4), d(rng, 1, 5)];
    OpCase {
        inputs: vec![inp(rng, &s, true)],
        run32: Box::new(|t| t[0].sigmoid()),
        run64: Box::new(|v| s_sigmoid(&v[0])),
    }
}

fn case_silu(rng: &mut ChaCha8Rng) -> OpCase {
    let s = [d(rng, 1, 4), d(rng, 1, 5)];
    OpCase {
        inputs: vec![inp(rng, &s, true)],
        run32: Box::new(|t| t[0].silu()),
        run64: Box::new(|v| s_silu(&v[0])),
    }
}

fn case_gelu(rng: &mut ChaCha8Rng) -> OpCase {
    let s = [d(rng, 1, 4), d(rng, 1, 5)];
    OpCase {
        inputs: vec![inp(rng, &s, true)],
        run32: Box::new(|t| t[0].gelu()),
        run64: Box::new(|v| s_gelu(&v[0])),
    }
}

fn case_group_norm(rng: &mut ChaCha8Rng) -> OpCase {
    let groups = d(rng, 1, 2);
    let c = groups * d(rng, 1, 3);
    let s = [d(rng, 1, 2), c, d(rng, 2, 4), d(rng, 2, 4)];
    OpCase {
        inputs: vec![inp(rng, &s, true), inp(rng, &[c], true), inp(rng, &[c], true)],
        run32: Box::new(move |t| t[0].group_norm(groups, &t[1], &t[2], 1e-5)),
        run64: Box::new(move |v| s_group_norm(&v[0], groups, &v[1], &v[2], 1e-5)),
    }
}

fn case_layer_norm(rng: &mut ChaCha8Rng) -> OpCase {
    let dd = d(rng, 3, 6);
    let s = [d(rng, 1, 3), d(rng, 1, 3), dd];
    OpCase {
        inputs: vec![inp(rng, &s, true), inp(rng, &[dd], true), inp(rng, &[dd], true)],
        run32: Box::new(|t| t[0].layer_norm(&t[1], &t[2], 1e-5)),
        run64: Box::new(|v| s_layer_norm(&v[0], &v[1], &v[2], 1e-5)),
    }
}

fn case_softmax(rng: &mut ChaCha8Rng) -> OpCase {
    let s = [d(rng, 1, 4), d(rng, 2, 6)];
    OpCase {
        inputs: vec![inp(rng, &s, true)],
        run32: Box::new(|t| t[0].softmax_lastdim()),
        run64: Box::new(|v| s_softmax_last(&v[0])),
    }
}

fn case_mean_all(rng: &mut ChaCha8Rng) -> OpCase {
    let s = [d(rng, 1, 4), d(rng, 1, 5)];
    OpCase {
        inputs: vec![inp(rng, &s, true)],
        run32: Box::new(|t| t[0].mean_all()),
        run64: Box::new(|v| s_mean_all(&v[0])),
    }
}

fn case_cross_entropy(rng: &mut ChaCha8Rng) -> OpCase {
    let (b, c) = (d(rng, 1, 4), d(rng, 2, 5));
    let targets: Vec<usize> = (0..b).map(|_| rng.gen_range(0..c)).collect();
    let t2 = targets.clone();
    OpCase {
        inputs: vec![inp(rng, &[b, c], true)],
        run32: Box::new(move |t| t[0].cross_entropy_mean(&targets)),
        run64: Box::new(move |v| s_cross_entropy_mean(&v[0], &t2)),
    }
}

fn case_l2_normalize(rng: &mut ChaCha8Rng) -> OpCase {
    let s = [d(rng, 1, 4), d(rng, 3, 6)];
    OpCase {
        inputs: vec![inp(rng, &s, true)],
        run32: Box::new(|t| t[0].l2_normalize_rows()),
        run64: Box::new(|v| s_l2_normalize_rows(&v[0])),
    }
}

fn case_add_broadcast0(rng: &mut ChaCha8Rng) -> OpCase {
    let (b, l, dd) = (d(rng, 1, 3), d(rng, 1, 3), d(rng, 1, 4));
    OpCase {
        inputs: vec![inp(rng, &[b, l, dd], true), inp(rng, &[l, dd], true)],
        run32: Box::new(|t| t[0].add_broadcast0(&t[1])),
        run64: Box::new(|v| s_add_broadcast0(&v[0], &v[1])),
    }
}

fn case_add_chan_batched(rng: &mut ChaCha8Rng) -> OpCase {
    let s = [d(rng, 1, 2), d(rng, 1, 3), d(rng, 2, 3), d(rng, 2, 3)];
    OpCase {
        inputs: vec![inp(rng, &s, true), inp(rng, &[s[0], s[1]], true)],
        run32: Box::new(|t| t[0].add_chan_batched(&t[1])),
        run64: Box::new(|v| s_add_chan_batched(&v[0], &v[1])),
    }
}

fn case_concat_rows(rng: &mut ChaCha8Rng) -> OpCase {
    let dd = d(rng, 1, 4);
    let parts = d(rng, 2, 3);
    let inputs: Vec<Input> = (0..parts)
        .map(|_| {
            let r = d(rng, 1, 3);
            inp(rng, &[r, dd], true)
        })
        .collect();
    OpCase {
        inputs,
        run32: Box::new(|t| {
            let refs: Vec<&Tensor> = t.iter().collect();
            ops::concat_rows(&refs)
        }),
        run64: Box::new(|v| {
            let refs: Vec<&V> = v.iter().collect();
            s_concat_rows(&refs)
        }),
    }
}

fn case_stack(rng: &mut ChaCha8Rng) -> OpCase {
    let s = [d(rng, 1, 3), d(rng, 1, 4)];
    let parts = d(rng, 2, 3);
    let inputs: Vec<Input> = (0..parts).map(|_| inp(rng, &s, true)).collect();
    OpCase {
        inputs,
        run32: Box::new(|t| {
            let refs: Vec<&Tensor> = t.iter().collect();
            ops::stack(&refs)
        }),
        run64: Box::new(|v| {
            let refs: Vec<&V> = v.iter().collect();
            s_stack(&refs)
        }),
    }
}

fn case_concat_channels(rng: &mut ChaCha8Rng) -> OpCase {
    let (bn, h, w) = (d(rng, 1, 2), d(rng, 2, 3), d(rng, 2, 3));
    let (c1, c2) = (d(rng, 1, 3), d(rng, 1, 3));
    OpCase {
        inputs: vec![inp(rng, &[bn, c1, h, w], true), inp(rng, &[bn, c2, h, w], true)],
        run32: Box::new(|t| ops::concat_channels(&t[0], &t[1])),
        run64: Box::new(|v| s_concat_channels(&v[0], &v[1])),
    }
}

/// Denoising loss of a seeded conditioned micro-network, differentiated
/// with respect to the embedding table feeding its condition vectors.
/// The network predicts noise from a latent plus looked-up embeddings, and
/// the loss is mean squared error against a noise target — the same
/// objective shape the full trainer uses.
fn case_embedding_loss(rng: &mut ChaCha8Rng) -> OpCase {
    let (b, dz, de, hd, out) = (2, 6, 5, 8, 4);
    let vocab = 6;
    let ids: Vec<usize> = (0..b).map(|_| rng.gen_range(0..vocab)).collect();
    let ids2 = ids.clone();
    OpCase {
        inputs: vec![
            inp(rng, &[vocab, de], true),  // embedding table (the only trainable input)
            inp(rng, &[b, dz], false),     // latent z_t
            inp(rng, &[dz, hd], false),    // W_z
            inp(rng, &[de, hd], false),    // W_v
            inp(rng, &[hd], false),        // b1
            inp(rng, &[hd, out], false),   // W2
            inp(rng, &[out], false),       // b2
            inp(rng, &[b, out], false),    // noise target
        ],
        run32: Box::new(move |t| {
            let v = t[0].gather_rows(&ids)?;
            let h = t[1]
                .matmul(&t[2])?
                .add(&v.matmul(&t[3])?)?
                .add_broadcast0(&t[4])?
                .silu()?;
            let pred = h.matmul(&t[5])?.add_broadcast0(&t[6])?;
            ops::mse(&pred, &t[7])
        }),
        run64: Box::new(move |v| {
            let emb = s_gather_rows(&v[0], &ids2);
            let h = s_silu(&s_add_broadcast0(
                &s_add(&s_matmul(&v[1], &v[2]), &s_matmul(&emb, &v[3])),
                &v[4],
            ));
            let pred = s_add_broadcast0(&s_matmul(&h, &v[5]), &v[6]);
            s_mean_all(&s_mul(&s_sub(&pred, &v[7]), &s_sub(&pred, &v[7])))
        }),
    }
}

// ---------------------------------------------------------------------------
// Public entry points
// ---------------------------------------------------------------------------

type Gen = fn(&mut ChaCha8Rng) -> OpCase;

const ALL_OPS: &[(&str, Gen)] = &[
    ("add", case_add),
    ("sub", case_sub),
    ("mul", case_mul),
    ("add_scalar", case_add_scalar),
    ("mul_scalar", case_mul_scalar),
    ("matmul", case_matmul),
    ("bmm", case_bmm),
    ("transpose_last2", case_transpose),
    ("reshape", case_reshape),
    ("gather_rows", case_gather),
    ("conv2d", case_conv2d),
    ("upsample_nearest2x", case_upsample),
    ("sigmoid", case_sigmoid),
    ("silu", case_silu),
    ("gelu", case_gelu),
    ("group_norm", case_group_norm),
    ("layer_norm", case_layer_norm),
    ("softmax_lastdim", case_softmax),
    ("mean_all", case_mean_all),
    ("cross_entropy_mean", case_cross_entropy),
    ("l2_normalize_rows", case_l2_normalize),
    ("add_broadcast0", case_add_broadcast0),
    ("add_chan_batched", case_add_chan_batched),
    ("concat_rows", case_concat_rows),
    ("stack", case_stack),
    ("concat_channels", case_concat_channels),
];

/// Check every differentiable op against the f64 shadow oracle.
pub fn check_all_ops(cases_per_op: usize, seed: u64) -> Result<Vec<GradReport>> {
    ALL_OPS
        .iter()
        .map(|(name, gen)| check_op(name, cases_per_op, seed, gen))
        .collect()
}

/// Check the gradient of a denoising loss with respect to an embedding
/// table on a conditioned micro-network, and require it to be nonzero.
pub fn check_embedding_loss_grad(cases: usize, seed: u64) -> Result<GradReport> {
    let report =
        check_op_floor("embedding_loss", cases, seed, &case_embedding_loss, FWD_FLOOR_COMPOSITE)?;
    // The loss must actually depend on the table: some row used by the
    // condition lookup has to receive a non-vanishing gradient.
    let mut rng = rng::stream(seed, "embedding_loss_nonzero", 0);
    let case = case_embedding_loss(&mut rng);
    let tensors: Vec<Tensor> = case
        .inputs
        .iter()
        .map(|i| Tensor::from_vec(&i.shape, i.data.clone(), i.diff))
        .collect::<Result<_>>()?;
    let loss = (case.run32)(&tensors)?;
    loss.backward()?;
    let g = tensors[0].grad_or_zeros();
    let max_abs = g.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    if max_abs <= 1e-4 {
        return Err(Error::invalid(format!(
            "embedding gradient unexpectedly vanishes (max |g| = {max_abs:.3e})"
        )));
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Full text-conditioning composition: gradient w.r.t. override vectors
// ---------------------------------------------------------------------------

fn v_reshape(a: &V, shape: &[usize]) -> V {
    V::new(shape, a.data.clone())
}

/// Linear over the trailing axis of a 3-d shadow tensor.
fn s_linear3(x: &V, w: &V, b: &V) -> V {
    let d_in = *x.shape.last().unwrap();
    let rows: usize = x.data.len() / d_in;
    let flat = v_reshape(x, &[rows, d_in]);
    let y = s_add_broadcast0(&s_matmul(&flat, w), b);
    let mut out_shape = x.shape.clone();
    *out_shape.last_mut().unwrap() = w.shape[1];
    v_reshape(&y, &out_shape)
}

/// Checks the inversion-time gradient path: a prompt containing a
/// placeholder is embedded (override vectors spliced in), encoded by the
/// frozen two-block attention encoder, pooled to a conditioning code, and
/// reduced to a scalar. The engine gradient w.r.t. each override element
/// is compared against central finite differences on an independently
/// written f64 replica of the whole composition.
pub fn check_text_override_grad(cases: usize, seed: u64) -> Result<GradReport> {
    use crate::text::{EmbeddingTable, TextEncoder, Vocabulary, BOS_ID, CONTEXT_LEN, TEXT_DIM};

    let mut vocab = Vocabulary::standard();
    let pid = vocab.register_placeholder("<x>")?;
    let base_size = vocab.base_size();
    let mut wrng = rng::stream(seed, "text_shadow_weights", 0);
    let base = Tensor::randn(&[base_size, TEXT_DIM], &mut wrng)
        .mul_scalar(0.3)
        .expect("finite");
    let encoder = std::sync::Arc::new(TextEncoder::new(&mut wrng, false));

    // prompt: bos + "a photo of a <x>." — placeholder at position 5
    let mut tokens = vec![BOS_ID];
    tokens.extend(vocab.tokenize("a photo of a <x>."));
    let ph_pos = tokens.iter().position(|&t| t == pid).expect("placeholder present");
    let n_vectors = 2usize;

    // f64 replicas of every frozen weight, keyed by parameter name
    let mut named = Vec::new();
    Params::named_params(&*encoder, "enc", &mut named);
    let mut wmap: std::collections::BTreeMap<String, V> = named
        .into_iter()
        .map(|(name, t)| {
            let shape = t.shape().to_vec();
            let data = t.with_data(|d| d.iter().map(|&x| x as f64).collect());
            (name, V::new(&shape, data))
        })
        .collect();
    let table_v = {
        let shape = base.shape().to_vec();
        let data: Vec<f64> = base.with_data(|d| d.iter().map(|&x| x as f64).collect());
        V::new(&shape, data)
    };
    let pos_v = wmap.remove("enc.pos").expect("positional table present");

    let seq_len = tokens.len() + n_vectors - 1; // placeholder expands in place
    let mask_v = {
        let mut data = vec![0.0f64; CONTEXT_LEN * CONTEXT_LEN];
        for q in 0..CONTEXT_LEN {
            for k in seq_len..CONTEXT_LEN {
                data[q * CONTEXT_LEN + k] = -1e9;
            }
        }
        V::new(&[1, CONTEXT_LEN, CONTEXT_LEN], data)
    };
    let pool_v = {
        let mut data = vec![0.0f64; CONTEXT_LEN];
        for k in 0..seq_len {
            data[k] = 1.0 / seq_len as f64;
        }
        V::new(&[1, 1, CONTEXT_LEN], data)
    };

    let shadow_block = move |x: &V, wmap: &std::collections::BTreeMap<String, V>, p: &str, mask: &V| -> V {
        let g = |s: &str| wmap.get(&format!("{p}.{s}")).unwrap_or_else(|| panic!("missing {p}.{s}"));
        let h = s_layer_norm(x, g("ln1.gamma"), g("ln1.beta"), 1e-5);
        let q = s_linear3(&h, g("q.weight"), g("q.bias"));
        let k = s_linear3(&h, g("k.weight"), g("k.bias"));
        let v = s_linear3(&h, g("v.weight"), g("v.bias"));
        let scale = 1.0 / (TEXT_DIM as f64).sqrt();
        let scores = s_map(&s_bmm(&q, &s_transpose_last2(&k)), |z| z * scale);
        let att = s_softmax_last(&s_add(&scores, mask));
        let a = s_bmm(&att, &v);
        let x = s_add(x, &s_linear3(&a, g("o.weight"), g("o.bias")));
        let h2 = s_layer_norm(&x, g("ln2.gamma"), g("ln2.beta"), 1e-5);
        let f = s_linear3(&s_gelu(&s_linear3(&h2, g("ff1.weight"), g("ff1.bias"))), g("ff2.weight"), g("ff2.bias"));
        s_add(&x, &f)
    };

    let tokens32 = tokens.clone();
    let base32 = base.clone();
    let enc32 = encoder.clone();
    let gen = move |rng: &mut ChaCha8Rng| -> OpCase {
        let inputs: Vec<Input> = (0..n_vectors)
            .map(|_| Input {
                shape: vec![TEXT_DIM],
                data: randn_vec(rng, TEXT_DIM).iter().map(|v| v * 0.3).collect(),
                diff: true,
            })
            .collect();

        let tokens = tokens32.clone();
        let base = base32.clone();
        let enc = enc32.clone();
        let run32 = Box::new(move |ins: &[Tensor]| -> Result<Tensor> {
            let mut table = EmbeddingTable::from_tensor(base.clone());
            table.set_override(pid, ins.to_vec())?;
            let emb = table.embed(&tokens, base_size)?;
            enc.encode(&[emb])
        });

        let table_v = table_v.clone();
        let pos_v = pos_v.clone();
        let mask_v = mask_v.clone();
        let pool_v = pool_v.clone();
        let wmap = wmap.clone();
        let shadow_block = shadow_block.clone();
        let pre_ids: Vec<usize> = tokens32[..ph_pos].to_vec();
        let post_ids: Vec<usize> = tokens32[ph_pos + 1..].to_vec();
        let run64 = Box::new(move |ins: &[V]| -> V {
            let mut parts: Vec<V> = Vec::new();
            parts.push(s_gather_rows(&table_v, &pre_ids));
            for v in ins {
                parts.push(v_reshape(v, &[1, TEXT_DIM]));
            }
            if !post_ids.is_empty() {
                parts.push(s_gather_rows(&table_v, &post_ids));
            }
            parts.push(V::new(
                &[CONTEXT_LEN - seq_len, TEXT_DIM],
                vec![0.0; (CONTEXT_LEN - seq_len) * TEXT_DIM],
            ));
            let refs: Vec<&V> = parts.iter().collect();
            let x = v_reshape(&s_concat_rows(&refs), &[1, CONTEXT_LEN, TEXT_DIM]);
            let x = s_add_broadcast0(&x, &pos_v);
            let x = shadow_block(&x, &wmap, "enc.block1", &mask_v);
            let x = shadow_block(&x, &wmap, "enc.block2", &mask_v);
            let x = s_layer_norm(
                &x,
                wmap.get("enc.ln_f.gamma").unwrap(),
                wmap.get("enc.ln_f.beta").unwrap(),
                1e-5,
            );
            v_reshape(&s_bmm(&pool_v, &x), &[1, TEXT_DIM])
        });

        OpCase { inputs, run32, run64 }
    };

    check_op_floor("text_override_grad", cases, seed, &gen, FWD_FLOOR_COMPOSITE)
}
