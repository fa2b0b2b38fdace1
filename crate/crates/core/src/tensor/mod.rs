//! Dense row-major tensors with tape-based reverse-mode differentiation.
//!
//! A [`Tensor`] is an immutable value. Tensors created through
//! [`Tape::leaf`] (and everything computed from them) carry a handle into
//! that tape; every primitive applied to them is recorded together with
//! the values its backward rule needs. Tensors without a tape handle are
//! constants and cost nothing beyond the forward computation, which is how
//! inference runs.
//!
//! ```
//! use dpn_s2s::tensor::{Tape, Tensor};
//!
//! let tape = Tape::<f64>::new();
//! let x = tape.leaf(&Tensor::from_vec(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
//! let loss = x.mul(&x).unwrap().sum_all().unwrap();
//! let grads = loss.backward().unwrap();
//! assert_eq!(grads.get(&x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

mod grad_check;
mod ops;
mod scalar;
mod tape;

use std::fmt;
use std::sync::Arc;

pub use grad_check::{grad_check, relative_error, GradCheckReport};
pub use ops::{conv1d, BinaryKind, Padding};
pub use scalar::Scalar;
pub(crate) use scalar::gemm;
pub use tape::{Gradients, Tape};

use crate::error::{Error, Result};
use tape::NodeRef;

#[derive(Clone)]
pub struct Tensor<T: Scalar> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
    node: Option<NodeRef<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim("from_vec", &shape, &[data.len()]));
        }
        Ok(Self::from_parts(shape, Arc::new(data)))
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Arc<Vec<T>>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data,
            node: None,
        }
    }

    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::from_vec(shape, data.iter().map(|&x| T::cast(x)).collect())
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape, Arc::new(vec![T::zero(); n]))
    }

    pub fn full(shape: Vec<usize>, value: T) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape, Arc::new(vec![value; n]))
    }

    pub fn scalar(value: T) -> Self {
        Self::from_parts(vec![], Arc::new(vec![value]))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Size of the last dimension (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub(crate) fn data_arc(&self) -> &Arc<Vec<T>> {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.data.as_ref().clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.as_f64()).collect()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(Error::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// Whether this tensor is recorded on a tape.
    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    /// Same value, detached from any tape.
    pub fn detach(&self) -> Self {
        Self::from_parts(self.shape.clone(), self.data.clone())
    }

    pub fn to_dtype<U: Scalar>(&self) -> Tensor<U> {
        Tensor::from_parts(
            self.shape.clone(),
            Arc::new(self.data.iter().map(|x| U::cast(x.as_f64())).collect()),
        )
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub(crate) fn node(&self) -> Option<&NodeRef<T>> {
        self.node.as_ref()
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = f.debug_struct("Tensor");
        s.field("shape", &self.shape);
        if self.data.len() <= 16 {
            s.field("data", &self.data);
        }
        s.field("requires_grad", &self.requires_grad()).finish()
    }
}

/// Boolean attention mask; `true` marks a position that may be attended.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    shape: Vec<usize>,
    allowed: Arc<Vec<bool>>,
}

impl Mask {
    pub fn new(shape: Vec<usize>, allowed: Vec<bool>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != allowed.len() {
            return Err(Error::dim("mask", &shape, &[allowed.len()]));
        }
        Ok(Mask {
            shape,
            allowed: Arc::new(allowed),
        })
    }

    pub fn all(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Mask {
            shape,
            allowed: Arc::new(vec![true; n]),
        }
    }

    /// `[batch, queries, keys]` mask admitting keys `< lengths[b]`.
    pub fn key_padding(lengths: &[usize], queries: usize, keys: usize) -> Self {
        let mut allowed = Vec::with_capacity(lengths.len() * queries * keys);
        for &len in lengths {
            for _ in 0..queries {
                allowed.extend((0..keys).map(|j| j < len));
            }
        }
        Mask {
            shape: vec![lengths.len(), queries, keys],
            allowed: Arc::new(allowed),
        }
    }

    /// `[batch, t, t]` lower-triangular mask.
    pub fn causal(batch: usize, t: usize) -> Self {
        let mut allowed = Vec::with_capacity(batch * t * t);
        for _ in 0..batch {
            for i in 0..t {
                allowed.extend((0..t).map(|j| j <= i));
            }
        }
        Mask {
            shape: vec![batch, t, t],
            allowed: Arc::new(allowed),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn allowed(&self) -> &[bool] {
        &self.allowed
    }

    pub fn and(&self, other: &Mask) -> Result<Mask> {
        if self.shape != other.shape {
            return Err(Error::dim("mask and", &self.shape, &other.shape));
        }
        let allowed = self
            .allowed
            .iter()
            .zip(other.allowed.iter())
            .map(|(&a, &b)| a && b)
            .collect();
        Ok(Mask {
            shape: self.shape.clone(),
            allowed: Arc::new(allowed),
        })
    }
}

#[cfg(test)]
mod tests;
