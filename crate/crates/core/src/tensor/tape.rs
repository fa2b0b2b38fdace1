use std::cell::RefCell;
use std::rc::Rc;
use std::sync::Arc;

use super::ops::Op;
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Ordered record of primitive operations for one forward/backward pass.
///
/// Node ids are assigned in recording order, so every operation's inputs
/// precede it. [`Tensor::backward`] consumes the tape; recording onto a
/// consumed tape is an error. Create a fresh tape per training step.
pub struct Tape<T: Scalar>(Rc<RefCell<TapeInner<T>>>);

impl<T: Scalar> Clone for Tape<T> {
    fn clone(&self) -> Self {
        Tape(self.0.clone())
    }
}

struct TapeInner<T: Scalar> {
    records: Vec<Record<T>>,
    consumed: bool,
}

pub(crate) struct Record<T: Scalar> {
    pub(crate) numel: usize,
    pub(crate) op: Op<T>,
}

#[derive(Clone)]
pub(crate) struct NodeRef<T: Scalar> {
    pub(crate) tape: Tape<T>,
    pub(crate) id: usize,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape(Rc::new(RefCell::new(TapeInner {
            records: Vec::new(),
            consumed: false,
        })))
    }

    /// Registers `value` as a differentiable input and returns the tracked
    /// handle.
    pub fn leaf(&self, value: &Tensor<T>) -> Tensor<T> {
        let id = self
            .push(value.numel(), Op::Leaf)
            .expect("leaf on a consumed tape");
        Tensor {
            shape: value.shape.clone(),
            data: value.data.clone(),
            node: Some(NodeRef {
                tape: self.clone(),
                id,
            }),
        }
    }

    /// Number of recorded operations (leaves included).
    pub fn len(&self) -> usize {
        self.0.borrow().records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_consumed(&self) -> bool {
        self.0.borrow().consumed
    }

    pub(crate) fn same(&self, other: &Tape<T>) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    pub(crate) fn push(&self, numel: usize, op: Op<T>) -> Result<usize> {
        let mut inner = self.0.borrow_mut();
        if inner.consumed {
            return Err(Error::Contract("recording on a consumed tape".into()));
        }
        inner.records.push(Record { numel, op });
        Ok(inner.records.len() - 1)
    }
}

/// Gradient buffers produced by [`Tensor::backward`], keyed by leaf.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to a leaf created on the consumed
    /// tape. `None` when the leaf did not influence the loss.
    pub fn get(&self, leaf: &Tensor<T>) -> Option<Tensor<T>> {
        let node = leaf.node.as_ref()?;
        let g = self.grads.get(node.id)?.as_ref()?;
        Some(Tensor::from_parts(leaf.shape.clone(), Arc::new(g.clone())))
    }

    pub fn get_data(&self, leaf: &Tensor<T>) -> Option<&[T]> {
        let node = leaf.node.as_ref()?;
        self.grads.get(node.id)?.as_deref()
    }

    /// Moves out the gradient of `leaf`, or zeros if it was unreachable.
    pub fn take_or_zeros(&mut self, leaf: &Tensor<T>) -> Vec<T> {
        leaf.node
            .as_ref()
            .and_then(|n| self.grads.get_mut(n.id))
            .and_then(Option::take)
            .unwrap_or_else(|| vec![T::zero(); leaf.numel()])
    }
}

/// Accumulator for per-node gradients during the reverse sweep.
pub(crate) struct GradSink<'a, T: Scalar> {
    grads: &'a mut [Option<Vec<T>>],
    sizes: &'a [usize],
}

impl<T: Scalar> GradSink<'_, T> {
    /// Buffer for node `id`, zero-initialized on first use.
    pub(crate) fn buf(&mut self, id: usize) -> &mut [T] {
        let n = self.sizes[id];
        self.grads[id].get_or_insert_with(|| vec![T::zero(); n])
    }

    pub(crate) fn add(&mut self, id: Option<usize>, g: &[T]) {
        if let Some(id) = id {
            let buf = self.buf(id);
            for (b, &x) in buf.iter_mut().zip(g) {
                *b = *b + x;
            }
        }
    }

    /// Adds an owned buffer, moving it in when the slot is still empty.
    pub(crate) fn put(&mut self, id: Option<usize>, g: Vec<T>) {
        if let Some(id) = id {
            match &mut self.grads[id] {
                Some(buf) => {
                    for (b, x) in buf.iter_mut().zip(g) {
                        *b = *b + x;
                    }
                }
                slot @ None => *slot = Some(g),
            }
        }
    }
}

impl<T: Scalar> Tensor<T> {
    /// Reverse sweep from a scalar loss. Gradients of tensors used several
    /// times are summed. The tape is consumed.
    pub fn backward(&self) -> Result<Gradients<T>> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape
            )));
        }
        let node = self
            .node
            .as_ref()
            .ok_or_else(|| Error::Contract("backward on a tensor that is not on a tape".into()))?;
        let records = {
            let mut inner = node.tape.0.borrow_mut();
            if inner.consumed {
                return Err(Error::Contract("tape already consumed".into()));
            }
            inner.consumed = true;
            std::mem::take(&mut inner.records)
        };
        let sizes: Vec<usize> = records.iter().map(|r| r.numel).collect();
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(records.len());
        grads.resize_with(records.len(), || None);
        grads[node.id] = Some(vec![T::one()]);

        for id in (0..=node.id).rev() {
            if matches!(records[id].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let mut sink = GradSink {
                grads: &mut grads,
                sizes: &sizes,
            };
            records[id].op.backward(&g, &mut sink);
        }
        Ok(Gradients { grads })
    }
}
