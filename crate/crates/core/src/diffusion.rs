//! Denoising loss, deterministic DDIM sampling and closed-form DDIM
//! inversion, and classifier-free guidance.
//!
//! The cores here are written against a noise-prediction closure
//! `eps_fn(x, t)` rather than a concrete network, so unit tests can drive
//! them with analytically tractable mock denoisers and the model layer can
//! plug in the conditioned network (with guidance folded into the closure).

use crate::error::{Error, Result};
use crate::ops;
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

/// Classifier-free guidance settings: the final noise estimate is
/// `eps_u + scale * (eps_c - eps_u)`, with the unconditional branch driven
/// by `uncond_prompt` through the same text encoder.
#[derive(Debug, Clone)]
pub struct GuidanceConfig {
    pub scale: f32,
    pub uncond_prompt: String,
}

impl GuidanceConfig {
    pub fn new(scale: f32) -> Result<GuidanceConfig> {
        if !(scale >= 0.0 && scale.is_finite()) {
            return Err(Error::invalid(format!("guidance scale {scale} must be >= 0")));
        }
        Ok(GuidanceConfig {
            scale,
            uncond_prompt: String::new(),
        })
    }

    /// Default sampling guidance used across the crate.
    pub fn default_sampling() -> GuidanceConfig {
        GuidanceConfig::new(5.0).expect("5 is a valid scale")
    }

    /// No guidance: the conditional estimate is used as-is.
    pub fn none() -> GuidanceConfig {
        GuidanceConfig::new(1.0).expect("1 is a valid scale")
    }
}

/// `eps_u + s*(eps_c - eps_u)`; the endpoints s=0 and s=1 return the exact
/// input tensors so no rounding is introduced where none is needed.
pub fn cfg_combine(eps_uncond: &Tensor, eps_cond: &Tensor, s: f32) -> Result<Tensor> {
    if eps_uncond.shape() != eps_cond.shape() {
        return Err(Error::ShapeMismatch {
            op: "cfg_combine",
            detail: format!("{:?} vs {:?}", eps_uncond.shape(), eps_cond.shape()),
        });
    }
    if !(s >= 0.0 && s.is_finite()) {
        return Err(Error::invalid(format!("guidance scale {s} must be >= 0")));
    }
    if s == 0.0 {
        return Ok(eps_uncond.clone());
    }
    if s == 1.0 {
        return Ok(eps_cond.clone());
    }
    eps_uncond.add(&eps_cond.sub(eps_uncond)?.mul_scalar(s)?)
}

/// Denoising objective: noise the latent to time `t`, ask the closure for
/// a noise estimate, and return the mean squared error against the true
/// noise. Differentiable through anything the closure touches.
pub fn noise_prediction_loss(
    schedule: &NoiseSchedule,
    z0: &Tensor,
    t: usize,
    eps: &Tensor,
    eps_fn: impl FnOnce(&Tensor, usize) -> Result<Tensor>,
) -> Result<Tensor> {
    let z_t = schedule.q_sample(z0, t, eps)?;
    let eps_hat = eps_fn(&z_t, t)?;
    if eps_hat.shape() != eps.shape() {
        return Err(Error::ShapeMismatch {
            op: "noise_prediction_loss",
            detail: format!("eps_hat {:?} vs eps {:?}", eps_hat.shape(), eps.shape()),
        });
    }
    ops::mse(&eps_hat, eps)
}

/// The timestep grid visited by `steps`-step DDIM over a `t_max` schedule:
/// `[0, t_max/steps, ..., t_max]`, length steps+1, strictly increasing.
/// Forward noising with a per-sample timestep: item i of `z0` is diffused
/// to its own `t[i]`. Equivalent to calling `q_sample` per item.
pub fn q_sample_batch(
    schedule: &NoiseSchedule,
    z0: &Tensor,
    t: &[usize],
    eps: &Tensor,
) -> Result<Tensor> {
    if z0.shape() != eps.shape() {
        return Err(Error::ShapeMismatch {
            op: "q_sample_batch",
            detail: format!("{:?} vs {:?}", z0.shape(), eps.shape()),
        });
    }
    let s = z0.shape();
    if s.is_empty() || s[0] != t.len() {
        return Err(Error::invalid(format!(
            "q_sample_batch: {} timesteps for batch shape {s:?}",
            t.len()
        )));
    }
    let item = z0.len() / s[0];
    let mut a = Vec::with_capacity(z0.len());
    let mut b = Vec::with_capacity(z0.len());
    for &ti in t {
        if ti < 1 || ti > schedule.t_max() {
            return Err(Error::invalid(format!(
                "q_sample_batch: timestep {ti} outside 1..={}",
                schedule.t_max()
            )));
        }
        let ab = schedule.alpha_bar(ti);
        a.extend(std::iter::repeat(ab.sqrt()).take(item));
        b.extend(std::iter::repeat((1.0 - ab).sqrt()).take(item));
    }
    let a = Tensor::from_vec(s, a, false)?;
    let b = Tensor::from_vec(s, b, false)?;
    z0.mul(&a)?.add(&eps.mul(&b)?)
}

pub fn ddim_timesteps(t_max: usize, steps: usize) -> Result<Vec<usize>> {
    if steps < 1 || steps > t_max {
        return Err(Error::invalid(format!(
            "ddim: steps={steps} must be in 1..={t_max}"
        )));
    }
    Ok((0..=steps).map(|i| i * t_max / steps).collect())
}

/// Deterministic (eta = 0) DDIM sampling from a starting noise latent
/// `x_start` at t = t_max down to a clean latent at t = 0. `eps_fn`
/// receives the current latent and the timestep its estimate refers to.
pub fn ddim_sample_core(
    schedule: &NoiseSchedule,
    x_start: &Tensor,
    steps: usize,
    mut eps_fn: impl FnMut(&Tensor, usize) -> Result<Tensor>,
) -> Result<Tensor> {
    let grid = ddim_timesteps(schedule.t_max(), steps)?;
    let mut x = x_start.detach();
    for i in (1..=steps).rev() {
        let (t, t_prev) = (grid[i], grid[i - 1]);
        let eps_hat = eps_fn(&x, t)?;
        x = ddim_step(schedule, &x, &eps_hat, t, t_prev)?.detach();
    }
    Ok(x)
}

/// Closed-form DDIM inversion: run the update grid in reverse, estimating
/// noise at the *target* timestep of each hop, so that a subsequent
/// `ddim_sample_core` over the same grid walks the trajectory back.
/// Zero steps is the empty trajectory and returns the input unchanged.
pub fn ddim_invert_core(
    schedule: &NoiseSchedule,
    z0: &Tensor,
    steps: usize,
    mut eps_fn: impl FnMut(&Tensor, usize) -> Result<Tensor>,
) -> Result<Tensor> {
    if steps == 0 {
        return Ok(z0.detach());
    }
    let grid = ddim_timesteps(schedule.t_max(), steps)?;
    let mut x = z0.detach();
    for i in 0..steps {
        let (t, t_next) = (grid[i], grid[i + 1]);
        let eps_hat = eps_fn(&x, t_next)?;
        x = ddim_step(schedule, &x, &eps_hat, t, t_next)?.detach();
    }
    Ok(x)
}

/// One DDIM hop from time `t_from` to `t_to` (either direction) given a
/// noise estimate: reconstruct the clean-latent prediction at `t_from`,
/// then re-noise it to `t_to` along the deterministic trajectory.
fn ddim_step(
    schedule: &NoiseSchedule,
    x: &Tensor,
    eps_hat: &Tensor,
    t_from: usize,
    t_to: usize,
) -> Result<Tensor> {
    let a_from = schedule.alpha_bar(t_from);
    let a_to = schedule.alpha_bar(t_to);
    // x0_pred = (x - sqrt(1-a_from) * eps) / sqrt(a_from)
    let x0_pred = x
        .sub(&eps_hat.mul_scalar((1.0 - a_from).sqrt())?)?
        .mul_scalar(1.0 / a_from.sqrt())?;
    // x_to = sqrt(a_to) * x0_pred + sqrt(1-a_to) * eps
    x0_pred
        .mul_scalar(a_to.sqrt())?
        .add(&eps_hat.mul_scalar((1.0 - a_to).sqrt())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::make_schedule;

    #[test]
    fn guidance_scale_must_be_non_negative() {
        assert!(GuidanceConfig::new(-0.5).is_err());
        assert!(GuidanceConfig::new(f32::NAN).is_err());
        assert!(GuidanceConfig::new(0.0).is_ok());
    }

    #[test]
    fn cfg_endpoints_are_exact() {
        let a = Tensor::from_vec(&[4], vec![0.1, 0.2, 0.3, 0.4], false).unwrap();
        let b = Tensor::from_vec(&[4], vec![1.0, -1.0, 2.0, 0.5], false).unwrap();
        let bits = |t: &Tensor| t.to_vec().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&cfg_combine(&a, &b, 0.0).unwrap()), bits(&a));
        assert_eq!(bits(&cfg_combine(&a, &b, 1.0).unwrap()), bits(&b));
    }

    #[test]
    fn timestep_grid_spans_zero_to_t() {
        let g = ddim_timesteps(1000, 50).unwrap();
        assert_eq!(g.len(), 51);
        assert_eq!(g[0], 0);
        assert_eq!(g[50], 1000);
        assert_eq!(g[1], 20);
        assert!(g.windows(2).all(|w| w[0] < w[1]));
        assert!(ddim_timesteps(10, 11).is_err());
        assert!(ddim_timesteps(10, 0).is_err());
    }

    #[test]
    fn zero_step_inversion_is_identity() {
        let s = make_schedule(100, 1e-3, 1e-2).unwrap();
        let z = Tensor::from_vec(&[5], vec![1., 2., 3., 4., 5.], false).unwrap();
        let out = ddim_invert_core(&s, &z, 0, |_, _| unreachable!("no steps")).unwrap();
        assert_eq!(out.to_vec(), z.to_vec());
    }

    #[test]
    fn batched_q_sample_matches_per_item_calls() {
        let s = make_schedule(100, 1e-3, 1e-2).unwrap();
        let mut r = crate::rng::stream(13, "qsb", 0);
        let z0 = Tensor::randn(&[3, 2, 2, 2], &mut r);
        let eps = Tensor::randn(&[3, 2, 2, 2], &mut r);
        let t = [1usize, 40, 100];
        let batched = q_sample_batch(&s, &z0, &t, &eps).unwrap().to_vec();
        let z0v = z0.to_vec();
        let ev = eps.to_vec();
        for (i, &ti) in t.iter().enumerate() {
            let zi = Tensor::from_vec(&[2, 2, 2], z0v[i * 8..(i + 1) * 8].to_vec(), false).unwrap();
            let ei = Tensor::from_vec(&[2, 2, 2], ev[i * 8..(i + 1) * 8].to_vec(), false).unwrap();
            let want = s.q_sample(&zi, ti, &ei).unwrap().to_vec();
            let got = &batched[i * 8..(i + 1) * 8];
            for (a, b) in got.iter().zip(&want) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
        assert!(q_sample_batch(&s, &z0, &[1, 2], &eps).is_err());
        assert!(q_sample_batch(&s, &z0, &[1, 2, 101], &eps).is_err());
    }
}
