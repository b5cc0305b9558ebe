//! Network building blocks: parameterized layers with deterministic
//! seeded initialization, named-parameter enumeration for checkpointing,
//! and the attention/masking helpers shared by the text encoder and the
//! denoiser.
//!
//! Layers fix their `trainable` flag at construction; loading a checkpoint
//! overwrites values in place and never changes trainability.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Collection hook: every layer can enumerate its parameters in a fixed
/// order under a dotted name prefix.
pub trait Params {
    fn named_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>);

    fn params(&self) -> Vec<Tensor> {
        let mut named = Vec::new();
        self.named_params("", &mut named);
        named.into_iter().map(|(_, t)| t).collect()
    }
}

/// Copy every parameter value from `src` into `dst` (same architecture,
/// possibly different trainability). Names and shapes must line up.
pub fn copy_params(src: &dyn Params, dst: &dyn Params) -> Result<()> {
    let mut from = Vec::new();
    let mut to = Vec::new();
    src.named_params("p", &mut from);
    dst.named_params("p", &mut to);
    if from.len() != to.len() {
        return Err(Error::invalid(format!(
            "copy_params: {} source vs {} destination parameters",
            from.len(),
            to.len()
        )));
    }
    for ((ns, s), (nd, d)) in from.iter().zip(&to) {
        if ns != nd || s.shape() != d.shape() {
            return Err(Error::invalid(format!(
                "copy_params: mismatch {ns} {:?} vs {nd} {:?}",
                s.shape(),
                d.shape()
            )));
        }
        let src_data = s.to_vec();
        d.update_data(|dst| dst.copy_from_slice(&src_data))?;
    }
    Ok(())
}

fn uniform_init(shape: &[usize], bound: f32, rng: &mut ChaCha8Rng, trainable: bool) -> Tensor {
    let t = Tensor::rand_uniform(shape, -bound, bound, rng);
    if trainable {
        t.detach_to_param()
    } else {
        t
    }
}

// ---------------------------------------------------------------------------

pub struct Linear {
    pub weight: Tensor, // [in, out]
    pub bias: Tensor,   // [out]
}

impl Linear {
    pub fn new(d_in: usize, d_out: usize, rng: &mut ChaCha8Rng, trainable: bool) -> Linear {
        let bound = 1.0 / (d_in as f32).sqrt();
        Linear {
            weight: uniform_init(&[d_in, d_out], bound, rng, trainable),
            bias: uniform_init(&[d_out], bound, rng, trainable),
        }
    }

    /// Apply to the trailing feature axis of a 2-d or 3-d input.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let s = x.shape().to_vec();
        let d_in = *s.last().ok_or_else(|| Error::invalid("linear on 0-d input"))?;
        let rows = x.len() / d_in;
        let flat = x.reshape(&[rows, d_in])?;
        let y = flat.matmul(&self.weight)?.add_broadcast0(&self.bias)?;
        let d_out = self.weight.shape()[1];
        let mut out_shape = s;
        *out_shape.last_mut().unwrap() = d_out;
        y.reshape(&out_shape)
    }
}

impl Params for Linear {
    fn named_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}

// ---------------------------------------------------------------------------

pub struct Conv2dLayer {
    pub weight: Tensor, // [oc, ic, k, k]
    pub bias: Tensor,   // [oc]
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dLayer {
    pub fn new(
        ic: usize,
        oc: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
        trainable: bool,
    ) -> Conv2dLayer {
        let bound = 1.0 / ((ic * k * k) as f32).sqrt();
        Conv2dLayer {
            weight: uniform_init(&[oc, ic, k, k], bound, rng, trainable),
            bias: uniform_init(&[oc], bound, rng, trainable),
            stride,
            pad,
        }
    }

    /// Zero-initialized variant for a network's output projection, so a
    /// fresh denoiser starts by predicting zero noise.
    pub fn new_zeroed(
        ic: usize,
        oc: usize,
        k: usize,
        stride: usize,
        pad: usize,
        trainable: bool,
    ) -> Conv2dLayer {
        let wz = Tensor::zeros(&[oc, ic, k, k]);
        let bz = Tensor::zeros(&[oc]);
        Conv2dLayer {
            weight: if trainable { wz.detach_to_param() } else { wz },
            bias: if trainable { bz.detach_to_param() } else { bz },
            stride,
            pad,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.conv2d(&self.weight, Some(&self.bias), self.stride, self.pad)
    }
}

impl Params for Conv2dLayer {
    fn named_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}

// ---------------------------------------------------------------------------

pub struct GroupNormLayer {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub groups: usize,
}

impl GroupNormLayer {
    pub fn new(channels: usize, groups: usize, trainable: bool) -> GroupNormLayer {
        let g = Tensor::full(&[channels], 1.0).expect("ones are finite");
        let b = Tensor::zeros(&[channels]);
        GroupNormLayer {
            gamma: if trainable { g.detach_to_param() } else { g },
            beta: if trainable { b.detach_to_param() } else { b },
            groups,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.group_norm(self.groups, &self.gamma, &self.beta, 1e-5)
    }
}

impl Params for GroupNormLayer {
    fn named_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.gamma"), self.gamma.clone()));
        out.push((format!("{prefix}.beta"), self.beta.clone()));
    }
}

// ---------------------------------------------------------------------------

pub struct LayerNormLayer {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNormLayer {
    pub fn new(d: usize, trainable: bool) -> LayerNormLayer {
        let g = Tensor::full(&[d], 1.0).expect("ones are finite");
        let b = Tensor::zeros(&[d]);
        LayerNormLayer {
            gamma: if trainable { g.detach_to_param() } else { g },
            beta: if trainable { b.detach_to_param() } else { b },
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.layer_norm(&self.gamma, &self.beta, 1e-5)
    }
}

impl Params for LayerNormLayer {
    fn named_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.gamma"), self.gamma.clone()));
        out.push((format!("{prefix}.beta"), self.beta.clone()));
    }
}

// ---------------------------------------------------------------------------
// Attention helpers
// ---------------------------------------------------------------------------

/// Additive key mask for batched attention: 0 where the key position is
/// valid, -1e9 where it is padding. At f32, exp(-1e9 - max) underflows to
/// exactly zero, so padded keys contribute nothing at all — a property the
/// conditioning contract relies on.
pub fn key_mask_bias(lens: &[usize], l: usize) -> Result<Tensor> {
    let b = lens.len();
    let mut data = vec![0.0f32; b * l * l];
    for (bi, &len) in lens.iter().enumerate() {
        if len > l {
            return Err(Error::invalid(format!("mask: length {len} exceeds context {l}")));
        }
        for q in 0..l {
            for k in len..l {
                data[(bi * l + q) * l + k] = -1e9;
            }
        }
    }
    Tensor::from_vec(&[b, l, l], data, false)
}

/// Row weights for masked mean pooling: 1/len over valid positions.
pub fn mean_pool_weights(lens: &[usize], l: usize) -> Result<Tensor> {
    let b = lens.len();
    let mut data = vec![0.0f32; b * l];
    for (bi, &len) in lens.iter().enumerate() {
        if len == 0 || len > l {
            return Err(Error::invalid(format!("pool: invalid length {len} for context {l}")));
        }
        for k in 0..len {
            data[bi * l + k] = 1.0 / len as f32;
        }
    }
    Tensor::from_vec(&[b, 1, l], data, false)
}

/// Single-head scaled dot-product attention over packed [B, L, D] tensors
/// with an additive score bias.
pub fn attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    score_bias: Option<&Tensor>,
) -> Result<Tensor> {
    let d = *q
        .shape()
        .last()
        .ok_or_else(|| Error::invalid("attention on 0-d query"))?;
    let scores = q
        .bmm(&k.transpose_last2()?)?
        .mul_scalar(1.0 / (d as f32).sqrt())?;
    let scores = match score_bias {
        Some(bias) => scores.add(bias)?,
        None => scores,
    };
    scores.softmax_lastdim()?.bmm(v)
}

/// Sinusoidal timestep features of even dimension `dim`.
pub fn timestep_features(t: usize, dim: usize) -> Result<Tensor> {
    if dim < 2 || dim % 2 != 0 {
        return Err(Error::invalid(format!("timestep features need even dim, got {dim}")));
    }
    let half = dim / 2;
    let mut data = vec![0.0f32; dim];
    for i in 0..half {
        let freq = (-(10_000.0f64.ln()) * i as f64 / (half - 1).max(1) as f64).exp();
        let arg = t as f64 * freq;
        data[i] = arg.sin() as f32;
        data[half + i] = arg.cos() as f32;
    }
    Tensor::from_vec(&[dim], data, false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn linear_shapes_and_determinism() {
        let mut r1 = rng::stream(1, "lin", 0);
        let mut r2 = rng::stream(1, "lin", 0);
        let l1 = Linear::new(4, 6, &mut r1, false);
        let l2 = Linear::new(4, 6, &mut r2, false);
        assert_eq!(l1.weight.to_vec(), l2.weight.to_vec());
        let x = Tensor::zeros(&[2, 3, 4]);
        let y = l1.forward(&x).unwrap();
        assert_eq!(y.shape(), &[2, 3, 6]);
    }

    #[test]
    fn masked_keys_contribute_exactly_zero() {
        // Two batch items, second has a padded tail; perturbing the padded
        // key/value row must leave the output bit-identical.
        let mut r = rng::stream(2, "attn", 0);
        let l = 4;
        let q = Tensor::randn(&[1, l, 8], &mut r);
        let k = Tensor::randn(&[1, l, 8], &mut r);
        let v = Tensor::randn(&[1, l, 8], &mut r);
        let mask = key_mask_bias(&[3], l).unwrap();

        let out1 = attention(&q, &k, &v, Some(&mask)).unwrap();

        // perturb key + value at padded position 3
        let mut kv = k.to_vec();
        let mut vv = v.to_vec();
        for i in 0..8 {
            kv[3 * 8 + i] += 7.5;
            vv[3 * 8 + i] -= 3.25;
        }
        let k2 = Tensor::from_vec(&[1, l, 8], kv, false).unwrap();
        let v2 = Tensor::from_vec(&[1, l, 8], vv, false).unwrap();
        let out2 = attention(&q, &k2, &v2, Some(&mask)).unwrap();

        let bits = |t: &Tensor| t.to_vec().iter().map(|f| f.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&out1), bits(&out2));
    }

    #[test]
    fn pool_weights_sum_to_one_over_valid() {
        let w = mean_pool_weights(&[2, 5], 5).unwrap();
        let v = w.to_vec();
        assert_eq!(&v[..5], &[0.5, 0.5, 0.0, 0.0, 0.0]);
        let s: f32 = v[5..].iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
    }

    #[test]
    fn timestep_features_distinguish_times() {
        let a = timestep_features(1, 32).unwrap().to_vec();
        let b = timestep_features(999, 32).unwrap().to_vec();
        assert_ne!(a, b);
        assert!(a.iter().all(|v| v.abs() <= 1.0));
    }
}
