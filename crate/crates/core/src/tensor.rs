//! Dense f32 tensors with a recorded computation tape for reverse-mode
//! differentiation.
//!
//! Values are written once at construction; gradients accumulate behind a
//! lock so frozen tensors stay shareable across threads. Ops only record
//! the tape when some input actually needs a gradient, so inference over a
//! frozen model builds no graph at all. Every reduction in the engine runs
//! in a fixed sequential order, which makes seeded runs bit-reproducible.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

pub(crate) type BackwardFn = Box<dyn Fn(&[f32]) + Send + Sync>;

pub struct TensorData {
    id: u64,
    shape: Vec<usize>,
    data: RwLock<Vec<f32>>,
    grad: RwLock<Option<Vec<f32>>>,
    requires_grad: bool,
    /// True when a gradient must flow through or into this node.
    needs_grad: bool,
    parents: Vec<Tensor>,
    backward_fn: Option<BackwardFn>,
}

/// Shared handle to an n-dimensional f32 array, optionally part of a
/// recorded computation graph.
#[derive(Clone)]
pub struct Tensor(Arc<TensorData>);

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.0.id)
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

fn check_finite(op: &'static str, data: &[f32]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

impl Tensor {
    fn new_node(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<f32>,
        requires_grad: bool,
        parents: Vec<Tensor>,
        backward_fn: Option<BackwardFn>,
    ) -> Result<Tensor> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::ShapeMismatch {
                op,
                detail: format!("shape {:?} does not hold {} elements", shape, data.len()),
            });
        }
        check_finite(op, &data)?;
        let needs_grad = requires_grad || parents.iter().any(|p| p.0.needs_grad);
        let (parents, backward_fn) = if needs_grad {
            (parents, backward_fn)
        } else {
            (Vec::new(), None)
        };
        Ok(Tensor(Arc::new(TensorData {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data: RwLock::new(data),
            grad: RwLock::new(None),
            requires_grad,
            needs_grad,
            parents,
            backward_fn,
        })))
    }

    /// Leaf tensor from raw data.
    pub fn from_vec(shape: &[usize], data: Vec<f32>, requires_grad: bool) -> Result<Tensor> {
        Self::new_node("from_vec", shape.to_vec(), data, requires_grad, vec![], None)
    }

    pub fn scalar(value: f32) -> Result<Tensor> {
        Self::from_vec(&[1], vec![value], false)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Self::from_vec(shape, vec![0.0; n], false).expect("zeros is always finite")
    }

    pub fn full(shape: &[usize], value: f32) -> Result<Tensor> {
        let n = shape.iter().product();
        Self::from_vec(shape, vec![value; n], false)
    }

    /// Standard-normal leaf drawn from the given stream.
    pub fn randn(shape: &[usize], rng: &mut impl Rng) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        Self::from_vec(shape, data, false).expect("normal draws are finite")
    }

    /// Uniform leaf on [lo, hi).
    pub fn rand_uniform(shape: &[usize], lo: f32, hi: f32, rng: &mut impl Rng) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
        Self::from_vec(shape, data, false).expect("uniform draws are finite")
    }

    pub(crate) fn op_result(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<f32>,
        parents: Vec<Tensor>,
        backward_fn: BackwardFn,
    ) -> Result<Tensor> {
        Self::new_node(op, shape, data, false, parents, Some(backward_fn))
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn len(&self) -> usize {
        self.0.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub(crate) fn needs_grad(&self) -> bool {
        self.0.needs_grad
    }

    /// Run `f` over the tensor's values without copying them out.
    pub fn with_data<R>(&self, f: impl FnOnce(&[f32]) -> R) -> R {
        let guard = self.0.data.read().expect("tensor lock poisoned");
        f(&guard)
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.with_data(|d| d.to_vec())
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f32> {
        if self.len() != 1 {
            return Err(Error::invalid(format!(
                "item() on tensor of shape {:?}",
                self.shape()
            )));
        }
        Ok(self.with_data(|d| d[0]))
    }

    /// In-place update of the values (used by the optimizer on leaves).
    pub fn update_data(&self, f: impl FnOnce(&mut [f32])) -> Result<()> {
        let mut guard = self.0.data.write().expect("tensor lock poisoned");
        f(&mut guard);
        check_finite("update_data", &guard)
    }

    pub fn grad(&self) -> Option<Vec<f32>> {
        self.0.grad.read().expect("tensor lock poisoned").clone()
    }

    pub fn grad_or_zeros(&self) -> Vec<f32> {
        self.grad().unwrap_or_else(|| vec![0.0; self.len()])
    }

    pub fn zero_grad(&self) {
        *self.0.grad.write().expect("tensor lock poisoned") = None;
    }

    pub(crate) fn accumulate_grad(&self, contribution: &[f32]) {
        debug_assert_eq!(contribution.len(), self.len());
        let mut guard = self.0.grad.write().expect("tensor lock poisoned");
        match guard.as_mut() {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contribution) {
                    *gi += ci;
                }
            }
            None => *guard = Some(contribution.to_vec()),
        }
    }

    /// Copy of the values as a fresh leaf outside any recorded graph.
    pub fn detach(&self) -> Tensor {
        Tensor::from_vec(self.shape(), self.to_vec(), false).expect("detach preserves finiteness")
    }

    /// Fresh leaf with the same values that will collect gradients.
    pub fn detach_to_param(&self) -> Tensor {
        Tensor::from_vec(self.shape(), self.to_vec(), true).expect("detach preserves finiteness")
    }

    /// Reverse-mode sweep from a scalar. Populates `grad` on every
    /// `requires_grad` leaf reachable through the recorded tape.
    pub fn backward(&self) -> Result<()> {
        if self.len() != 1 {
            return Err(Error::invalid(format!(
                "backward() requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        self.accumulate_grad(&[1.0]);
        // Children-before-parents order, then replayed in reverse.
        let order = self.topo_order();
        for node in order.iter().rev() {
            if let Some(back) = &node.0.backward_fn {
                let grad = node.0.grad.read().expect("tensor lock poisoned").clone();
                if let Some(g) = grad {
                    back(&g);
                }
            }
        }
        // Interior activations are no longer needed once leaves are filled.
        for node in order.iter().rev() {
            if node.0.backward_fn.is_some() {
                node.zero_grad();
            }
        }
        Ok(())
    }

    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited = std::collections::HashSet::new();
        // Iterative post-order DFS: (node, next-parent-index) frames.
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.0.id);
        while let Some((node, idx)) = stack.pop() {
            if idx < node.0.parents.len() {
                let parent = node.0.parents[idx].clone();
                stack.push((node, idx + 1));
                if parent.0.needs_grad && visited.insert(parent.0.id) {
                    stack.push((parent, 0));
                }
            } else {
                order.push(node);
            }
        }
        order
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_data_length_must_agree() {
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 5], false).is_err());
    }

    #[test]
    fn non_finite_leaf_rejected() {
        assert!(Tensor::from_vec(&[2], vec![1.0, f32::NAN], false).is_err());
    }

    #[test]
    fn backward_requires_scalar() {
        let t = Tensor::from_vec(&[2], vec![1.0, 2.0], true).unwrap();
        assert!(t.backward().is_err());
    }

    #[test]
    fn gradient_of_constant_is_all_zeros() {
        let x = Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0], true).unwrap();
        let c = Tensor::scalar(5.0).unwrap();
        c.backward().unwrap();
        assert!(x.grad().is_none());
        assert_eq!(x.grad_or_zeros(), vec![0.0; 3]);
    }

    #[test]
    fn detach_copies_values_and_drops_history() {
        let x = Tensor::from_vec(&[2], vec![1.5, -2.0], true).unwrap();
        let d = x.detach();
        assert_eq!(d.to_vec(), x.to_vec());
        assert!(!d.requires_grad());
    }

    #[test]
    fn seeded_randn_is_bit_identical() {
        let mut a = crate::rng::stream(11, "t", 0);
        let mut b = crate::rng::stream(11, "t", 0);
        let x = Tensor::randn(&[32], &mut a);
        let y = Tensor::randn(&[32], &mut b);
        assert_eq!(x.to_vec(), y.to_vec());
    }
}
