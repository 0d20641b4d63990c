//! Dense f64 tensors with reverse-mode differentiation.
//!
//! A [`Tensor`] is an immutable, reference-counted value. Operations on
//! tensors that require gradients record their parents and a backward
//! closure; [`Tensor::backward`] walks the recorded graph in reverse
//! topological order and returns a [`Gradients`] map for every leaf.

mod autograd;
mod conv;
mod flops;
mod gemm;
mod gradcheck;
mod ops;
mod serialize;
mod special;

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub use autograd::Gradients;
pub use conv::{conv_output_size, deconv_output_size};
pub use flops::FlopCounter;
pub use gradcheck::gradcheck;
pub use serialize::{read_records, write_records, Record, WEIGHTS_MAGIC, WEIGHTS_VERSION};
pub use special::{
    gaussian_mass, local_window_attention, logistic_mass, logistic_sf, normal_cdf, normal_sf, LIKELIHOOD_FLOOR,
};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Identity of a tensor value within a process.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TensorId(u64);

/// Backward closure: receives the op's output values and the incoming
/// gradient, returns one optional gradient per parent (in parent order).
pub(crate) type BackwardFn = Box<dyn Fn(&[f64], &[f64]) -> Vec<Option<Vec<f64>>> + Send + Sync>;

pub(crate) struct Node {
    pub(crate) parents: Vec<Tensor>,
    pub(crate) backward: BackwardFn,
}

struct Inner {
    id: TensorId,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    node: Option<Node>,
}

#[derive(Clone)]
pub struct Tensor {
    inner: Arc<Inner>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    strides
}

impl Tensor {
    fn build(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, node: Option<Node>) -> Self {
        debug_assert_eq!(numel_of(&shape), data.len());
        Tensor {
            inner: Arc::new(Inner {
                id: TensorId(NEXT_ID.fetch_add(1, Ordering::Relaxed)),
                shape,
                data,
                requires_grad,
                node,
            }),
        }
    }

    /// Creates a constant tensor; fails when `data.len()` disagrees with `shape`.
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        if numel_of(shape) != data.len() {
            return Err(Error::shape("Tensor::new", shape, &[data.len()]));
        }
        Ok(Self::build(data, shape.to_vec(), false, None))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self::build(vec![value; numel_of(shape)], shape.to_vec(), false, None)
    }

    pub fn scalar(value: f64) -> Self {
        Self::build(vec![value], vec![], false, None)
    }

    /// Standard-normal samples scaled by `std`.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let data = (0..numel_of(shape)).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
        Self::build(data, shape.to_vec(), false, None)
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let data = (0..numel_of(shape)).map(|_| lo + (hi - lo) * rng.random::<f64>()).collect();
        Self::build(data, shape.to_vec(), false, None)
    }

    /// Returns a fresh leaf holding the same values, tracked for gradients.
    pub fn to_param(&self) -> Self {
        Self::build(self.inner.data.clone(), self.inner.shape.clone(), true, None)
    }

    /// Returns a fresh untracked leaf holding the same values.
    pub fn detach(&self) -> Self {
        if !self.inner.requires_grad {
            return self.clone();
        }
        Self::build(self.inner.data.clone(), self.inner.shape.clone(), false, None)
    }

    /// Records the result of an operation. A graph node is attached only when
    /// at least one parent takes part in differentiation.
    pub(crate) fn from_op(
        data: Vec<f64>,
        shape: Vec<usize>,
        parents: Vec<Tensor>,
        backward: impl Fn(&[f64], &[f64]) -> Vec<Option<Vec<f64>>> + Send + Sync + 'static,
    ) -> Self {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        let node = requires_grad.then(|| Node { parents, backward: Box::new(backward) });
        Self::build(data, shape, requires_grad, node)
    }

    pub fn id(&self) -> TensorId {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn ndim(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.inner.shape[axis]
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.inner.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub(crate) fn node(&self) -> Option<&Node> {
        self.inner.node.as_ref()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!("item() on tensor of shape {:?}", self.shape())));
        }
        Ok(self.inner.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.inner.data.iter().all(|v| v.is_finite())
    }

    pub fn has_nan(&self) -> bool {
        self.inner.data.iter().any(|v| v.is_nan())
    }

    /// Largest absolute elementwise difference; shapes must agree.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape() != other.shape() {
            return Err(Error::shape("max_abs_diff", self.shape(), other.shape()));
        }
        Ok(self.data().iter().zip(other.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_mismatched_shape() {
        assert!(Tensor::new(vec![1.0, 2.0, 3.0], &[2, 2]).is_err());
        let t = Tensor::new(vec![1.0; 6], &[2, 3]).unwrap();
        assert_eq!(t.numel(), 6);
        assert_eq!(strides_of(&[2, 3, 4]), vec![12, 4, 1]);
    }

    #[test]
    fn scalar_has_one_element() {
        let s = Tensor::scalar(3.5);
        assert_eq!(s.shape(), &[] as &[usize]);
        assert_eq!(s.item().unwrap(), 3.5);
    }

    #[test]
    fn constants_do_not_record_graph() {
        let a = Tensor::ones(&[3]);
        let b = a.add(&a).unwrap();
        assert!(!b.requires_grad());
        assert!(b.node().is_none());
    }
}
