//! Adam optimizer over tensor leaves.
//!
//! The state owns per-parameter moment buffers; parameters are passed to
//! each `step` call in a fixed order. The first call fixes the expected
//! shapes, and later calls that disagree are rejected rather than silently
//! mis-applying moments.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug)]
pub struct AdamState {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step_count: u64,
    first_moment: Vec<Vec<f32>>,
    second_moment: Vec<Vec<f32>>,
    shapes: Vec<Vec<usize>>,
}

impl AdamState {
    pub fn new(lr: f32) -> AdamState {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
            shapes: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One Adam update over `params`, consuming their accumulated grads.
    /// Gradients are not cleared; call [`zero_grads`] after.
    pub fn step(&mut self, params: &[&Tensor]) -> Result<()> {
        if self.shapes.is_empty() && !params.is_empty() {
            for p in params {
                self.shapes.push(p.shape().to_vec());
                self.first_moment.push(vec![0.0; p.len()]);
                self.second_moment.push(vec![0.0; p.len()]);
            }
        }
        if params.len() != self.shapes.len() {
            return Err(Error::invalid(format!(
                "adam step: {} params but state tracks {}",
                params.len(),
                self.shapes.len()
            )));
        }
        for (p, s) in params.iter().zip(&self.shapes) {
            if p.shape() != s.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    detail: format!("param {:?} vs moment {:?}", p.shape(), s),
                });
            }
        }
        self.step_count += 1;
        let t = self.step_count as f64;
        let bc1 = 1.0 - (self.beta1 as f64).powf(t);
        let bc2 = 1.0 - (self.beta2 as f64).powf(t);
        for (i, p) in params.iter().enumerate() {
            let g = p.grad_or_zeros();
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
            p.update_data(|data| {
                for j in 0..data.len() {
                    let gj = g[j];
                    m[j] = b1 * m[j] + (1.0 - b1) * gj;
                    v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                    let mhat = m[j] as f64 / bc1;
                    let vhat = v[j] as f64 / bc2;
                    data[j] -= (lr as f64 * mhat / (vhat.sqrt() + eps as f64)) as f32;
                }
            })?;
        }
        Ok(())
    }
}

/// Serializable view of the optimizer state, used by training-state
/// persistence so interrupted runs resume bit-exactly.
pub struct AdamSnapshot {
    pub step_count: u64,
    pub shapes: Vec<Vec<usize>>,
    pub first_moment: Vec<Vec<f32>>,
    pub second_moment: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn snapshot(&self) -> AdamSnapshot {
        AdamSnapshot {
            step_count: self.step_count,
            shapes: self.shapes.clone(),
            first_moment: self.first_moment.clone(),
            second_moment: self.second_moment.clone(),
        }
    }

    pub fn restore(lr: f32, snap: AdamSnapshot) -> Result<AdamState> {
        if snap.first_moment.len() != snap.shapes.len()
            || snap.second_moment.len() != snap.shapes.len()
        {
            return Err(Error::invalid("adam restore: moment/shape count mismatch"));
        }
        for ((s, m), v) in snap
            .shapes
            .iter()
            .zip(&snap.first_moment)
            .zip(&snap.second_moment)
        {
            let n: usize = s.iter().product();
            if m.len() != n || v.len() != n {
                return Err(Error::invalid(format!(
                    "adam restore: moments of {} / {} values for shape {s:?}",
                    m.len(),
                    v.len()
                )));
            }
        }
        Ok(AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: snap.step_count,
            first_moment: snap.first_moment,
            second_moment: snap.second_moment,
            shapes: snap.shapes,
        })
    }
}

pub fn zero_grads(params: &[&Tensor]) {
    for p in params {
        p.zero_grad();
    }
}

/// Learning rate after scaling the base rate by batch size and device
/// count, the convention used by the training recipes in this crate.
pub fn effective_lr(base_lr: f32, batch_size: usize, num_devices: usize) -> f32 {
    base_lr * batch_size as f32 * num_devices as f32
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_matches_hand_recurrence() {
        // Loss = p.mean() over a single element, so grad is exactly 1 each
        // step; compare three updates against the textbook recurrence.
        let p = Tensor::from_vec(&[1], vec![0.0], true).unwrap();
        let mut opt = AdamState::new(0.04);
        let mut expect = 0.0f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for t in 1..=3u32 {
            let loss = p.mean_all().unwrap();
            loss.backward().unwrap();
            opt.step(&[&p]).unwrap();
            zero_grads(&[&p]);

            let g = 1.0f64;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mhat = m / (1.0 - 0.9f64.powi(t as i32));
            let vhat = v / (1.0 - 0.999f64.powi(t as i32));
            expect -= 0.04 * mhat / (vhat.sqrt() + 1e-8);
            let got = p.item().unwrap() as f64;
            assert!(
                (got - expect).abs() < 1e-6,
                "step {t}: got {got}, expected {expect}"
            );
        }
        // first step of Adam moves by almost exactly -lr
        assert!((p.item().unwrap() + 3.0 * 0.04).abs() < 5e-3);
    }

    #[test]
    fn adam_rejects_shape_drift() {
        let p = Tensor::from_vec(&[2], vec![0.0; 2], true).unwrap();
        let q = Tensor::from_vec(&[3], vec![0.0; 3], true).unwrap();
        let mut opt = AdamState::new(0.01);
        opt.step(&[&p]).unwrap();
        assert!(opt.step(&[&q]).is_err());
        assert!(opt.step(&[&p, &q]).is_err());
    }

    #[test]
    fn effective_lr_scales_by_batch_and_devices() {
        let lr = effective_lr(0.005, 4, 2);
        assert!((lr - 0.04).abs() < 1e-9);
    }
}
