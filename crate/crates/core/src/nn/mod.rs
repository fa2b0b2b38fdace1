//! Named parameters and the layers built from tensor primitives.

mod layers;

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub use layers::{dropout, Embedding, FeedForward, GluConv, LayerNorm, MultiHeadAttention};

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Scalar, Tape, Tensor};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named parameter tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Scalar> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter {name}")));
        }
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value.detach());
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    /// Replaces a value; the shape must not change.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let cur = &self.values[id.0];
        if cur.shape() != value.shape() {
            return Err(Error::dim("parameter update", cur.shape(), value.shape()));
        }
        self.values[id.0] = value.detach();
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Makes the parameters available to a forward pass.
    ///
    /// With a tape every parameter becomes a leaf on it; without one they
    /// are plain constants.
    pub fn bind(&self, tape: Option<&Tape<T>>) -> Bound<T> {
        let values = match tape {
            Some(tape) => self.values.iter().map(|v| tape.leaf(v)).collect(),
            None => self.values.clone(),
        };
        Bound { values }
    }

    pub fn to_dtype<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::to_dtype).collect(),
            index: self.index.clone(),
        }
    }
}

/// Parameters as seen by one forward pass.
pub struct Bound<T: Scalar> {
    values: Vec<Tensor<T>>,
}

impl<T: Scalar> Bound<T> {
    /// Binding from explicit values in [`ParamStore::ids`] order.
    pub fn from_values(values: Vec<Tensor<T>>) -> Self {
        Bound { values }
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    /// Gradient of every parameter, zero-filled where the loss did not
    /// depend on it.
    pub fn gradients(&self, grads: &mut Gradients<T>) -> Vec<Vec<T>> {
        self.values.iter().map(|v| grads.take_or_zeros(v)).collect()
    }
}

/// Training flag plus the random stream that drives dropout.
pub struct ForwardCtx {
    training: bool,
    rng: ChaCha8Rng,
}

impl ForwardCtx {
    pub fn eval() -> Self {
        ForwardCtx {
            training: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn train(seed: u64) -> Self {
        ForwardCtx {
            training: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

/// Parameter initializers.
pub mod init {
    use super::*;

    pub fn normal<T: Scalar>(shape: Vec<usize>, std: f64, rng: &mut impl Rng) -> Tensor<T> {
        let n = shape.iter().product();
        let dist = Normal::new(0.0, std.max(0.0)).expect("finite std");
        let data = (0..n).map(|_| T::cast(dist.sample(rng))).collect();
        Tensor::from_vec(shape, data).expect("shape matches")
    }

    pub fn uniform<T: Scalar>(shape: Vec<usize>, bound: f64, rng: &mut impl Rng) -> Tensor<T> {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| T::cast(if bound > 0.0 { rng.random_range(-bound..bound) } else { 0.0 }))
            .collect();
        Tensor::from_vec(shape, data).expect("shape matches")
    }

    /// Glorot uniform for a `[fan_in, fan_out]` matrix.
    pub fn xavier<T: Scalar>(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor<T> {
        let bound = if fan_in + fan_out == 0 {
            0.0
        } else {
            (6.0 / (fan_in + fan_out) as f64).sqrt()
        };
        uniform(vec![fan_in, fan_out], bound, rng)
    }
}
