//! Noise schedule for the latent diffusion process.
//!
//! Timesteps are 1-based: `t` in `1..=t_max` indexes the noised marginals,
//! and `alpha_bar(0) == 1` denotes the clean latent. The default schedule
//! is linear betas over 1000 steps, the convention the rest of the crate
//! trains and samples against.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_T: usize = 1000;
pub const DEFAULT_BETA_START: f32 = 8.5e-4;
pub const DEFAULT_BETA_END: f32 = 1.2e-2;

#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    t_max: usize,
    betas: Vec<f32>,
    alphas_cumprod: Vec<f32>,
}

/// Linear-beta schedule with cumulative alpha products.
pub fn make_schedule(t_max: usize, beta_start: f32, beta_end: f32) -> Result<NoiseSchedule> {
    if t_max < 1 {
        return Err(Error::invalid("schedule: T must be >= 1"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::invalid(format!(
            "schedule: need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
        )));
    }
    let mut betas = Vec::with_capacity(t_max);
    for i in 0..t_max {
        let frac = if t_max == 1 {
            0.0
        } else {
            i as f32 / (t_max - 1) as f32
        };
        betas.push(beta_start + (beta_end - beta_start) * frac);
    }
    let mut alphas_cumprod = Vec::with_capacity(t_max);
    let mut prod = 1.0f32;
    for &b in &betas {
        prod *= 1.0 - b;
        alphas_cumprod.push(prod);
    }
    Ok(NoiseSchedule {
        t_max,
        betas,
        alphas_cumprod,
    })
}

impl NoiseSchedule {
    pub fn default_schedule() -> NoiseSchedule {
        make_schedule(DEFAULT_T, DEFAULT_BETA_START, DEFAULT_BETA_END)
            .expect("default schedule parameters are valid")
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    pub fn betas(&self) -> &[f32] {
        &self.betas
    }

    /// Cumulative product of (1 - beta) up to and including `t`;
    /// `alpha_bar(0)` is 1 by convention (no noise applied).
    pub fn alpha_bar(&self, t: usize) -> f32 {
        if t == 0 {
            1.0
        } else {
            self.alphas_cumprod[t - 1]
        }
    }

    /// Closed-form forward noising to time `t`:
    /// `z_t = sqrt(a)*z0 + sqrt(1-a)*eps` with `a = alpha_bar(t)`.
    pub fn q_sample(&self, z0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
        if t < 1 || t > self.t_max {
            return Err(Error::invalid(format!(
                "q_sample: t={t} outside 1..={}",
                self.t_max
            )));
        }
        q_sample_with(z0, self.alpha_bar(t), eps)
    }
}

/// Forward noising with an explicit mixing coefficient, shared by the
/// schedule path and by tests probing the boundary mixes directly.
pub fn q_sample_with(z0: &Tensor, alpha_bar: f32, eps: &Tensor) -> Result<Tensor> {
    if z0.shape() != eps.shape() {
        return Err(Error::ShapeMismatch {
            op: "q_sample",
            detail: format!("z0 {:?} vs eps {:?}", z0.shape(), eps.shape()),
        });
    }
    if !(0.0..=1.0).contains(&alpha_bar) {
        return Err(Error::invalid(format!(
            "q_sample: alpha_bar {alpha_bar} outside [0, 1]"
        )));
    }
    z0.mul_scalar(alpha_bar.sqrt())?
        .add(&eps.mul_scalar((1.0 - alpha_bar).sqrt())?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_invalid_bounds() {
        assert!(make_schedule(0, 0.1, 0.2).is_err());
        assert!(make_schedule(10, 0.0, 0.2).is_err());
        assert!(make_schedule(10, 0.3, 0.2).is_err());
        assert!(make_schedule(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn first_alpha_bar_is_one_minus_first_beta() {
        let s = make_schedule(10, 0.01, 0.02).unwrap();
        assert_eq!(s.alpha_bar(1), 1.0 - s.betas()[0]);
        assert_eq!(s.alpha_bar(0), 1.0);
    }

    #[test]
    fn alpha_bar_strictly_decreases_over_all_t() {
        let s = NoiseSchedule::default_schedule();
        for t in 1..=s.t_max() {
            assert!(
                s.alpha_bar(t) < s.alpha_bar(t - 1),
                "alpha_bar not strictly decreasing at t={t}"
            );
            assert!(s.alpha_bar(t) > 0.0);
        }
    }

    #[test]
    fn boundary_mixes_are_exact() {
        let z0 = Tensor::from_vec(&[3], vec![0.5, -1.0, 2.0], false).unwrap();
        let eps = Tensor::from_vec(&[3], vec![1.5, 0.25, -0.75], false).unwrap();
        let clean = q_sample_with(&z0, 1.0, &eps).unwrap();
        assert_eq!(clean.to_vec(), z0.to_vec());
        let noise = q_sample_with(&z0, 0.0, &eps).unwrap();
        assert_eq!(noise.to_vec(), eps.to_vec());
    }

    #[test]
    fn out_of_range_t_rejected() {
        let s = make_schedule(10, 0.01, 0.02).unwrap();
        let z = Tensor::zeros(&[2]);
        let e = Tensor::zeros(&[2]);
        assert!(s.q_sample(&z, 0, &e).is_err());
        assert!(s.q_sample(&z, 11, &e).is_err());
        assert!(s.q_sample(&z, 10, &e).is_ok());
    }
}
