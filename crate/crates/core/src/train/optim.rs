use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Scalar, Tensor};

/// Nesterov accelerated gradient in the velocity form
///
/// ```text
/// v' = mu * v - lr * g
/// p' = p + mu^2 * v - (1 + mu) * lr * g      (= p - mu * v + (1 + mu) * v')
/// ```
///
/// which tracks the look-ahead point `p + mu * v` of the classical
/// formulation, so gradients are taken at the stored parameters.
#[derive(Clone, Debug)]
pub struct Nag<T: Scalar> {
    pub lr: f64,
    pub momentum: f64,
    /// Global L2 norm bound on the gradient; larger gradients are rescaled
    /// to exactly this norm.
    pub clip: Option<f64>,
    velocity: Vec<Vec<T>>,
}

/// Diagnostics of one update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepInfo {
    pub grad_norm: f64,
    pub clipped: bool,
}

impl<T: Scalar> Nag<T> {
    pub fn new(lr: f64, momentum: f64, clip: Option<f64>, params: &ParamStore<T>) -> Result<Self> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be a finite value >= 0, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {momentum}")));
        }
        if let Some(c) = clip {
            if !(c > 0.0) {
                return Err(Error::Config(format!("clip threshold must be > 0, got {c}")));
            }
        }
        let velocity = params.ids().map(|id| vec![T::zero(); params.get(id).numel()]).collect();
        Ok(Nag {
            lr,
            momentum,
            clip,
            velocity,
        })
    }

    pub fn velocity(&self) -> &[Vec<T>] {
        &self.velocity
    }

    /// Replaces the velocity buffers; shapes must match the parameters.
    pub fn set_velocity(&mut self, velocity: Vec<Vec<T>>) -> Result<()> {
        let want: Vec<usize> = self.velocity.iter().map(Vec::len).collect();
        let got: Vec<usize> = velocity.iter().map(Vec::len).collect();
        if want != got {
            return Err(Error::dim("velocity buffers", &got, &want));
        }
        self.velocity = velocity;
        Ok(())
    }

    /// Applies one update. Nothing is modified when a gradient is non-finite.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Vec<T>]) -> Result<StepInfo> {
        let ids: Vec<_> = params.ids().collect();
        if grads.len() != ids.len() {
            return Err(Error::dim("gradients", &[grads.len()], &[ids.len()]));
        }
        let mut sq = 0.0;
        for (&id, g) in ids.iter().zip(grads) {
            if g.len() != params.get(id).numel() {
                return Err(Error::dim("gradient", &[g.len()], params.get(id).shape()));
            }
            if let Some((i, v)) = g.iter().enumerate().find(|(_, v)| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of {} at flat index {i} is {}",
                    params.name(id),
                    v.as_f64()
                )));
            }
            sq += g.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>();
        }
        let grad_norm = sq.sqrt();
        let scale = match self.clip {
            Some(c) if grad_norm > c => c / grad_norm,
            _ => 1.0,
        };
        let mu = T::cast(self.momentum);
        let mu2 = T::cast(self.momentum * self.momentum);
        let glr = T::cast((1.0 + self.momentum) * self.lr * scale);
        let lr = T::cast(self.lr * scale);
        for ((&id, g), v) in ids.iter().zip(grads).zip(&mut self.velocity) {
            let mut p = params.get(id).to_vec();
            for ((p, v), &g) in p.iter_mut().zip(v.iter_mut()).zip(g) {
                *p = *p + mu2 * *v - glr * g;
                *v = mu * *v - lr * g;
            }
            let shape = params.get(id).shape().to_vec();
            params.set(id, Tensor::from_vec(shape, p)?)?;
        }
        Ok(StepInfo {
            grad_norm,
            clipped: scale < 1.0,
        })
    }
}

/// Divides the learning rate when validation loss stops improving.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub factor: f64,
    /// Consecutive non-improving rounds tolerated before decaying.
    pub patience: usize,
    pub best: Option<f64>,
    pub stalls: usize,
}

impl LrSchedule {
    pub fn new(factor: f64, patience: usize) -> Self {
        LrSchedule {
            factor,
            patience,
            best: None,
            stalls: 0,
        }
    }

    /// Records one validation loss; returns whether `lr` was decayed.
    pub fn observe(&mut self, lr: &mut f64, loss: f64) -> bool {
        if self.best.is_none_or(|b| loss < b) {
            self.best = Some(loss);
            self.stalls = 0;
            return false;
        }
        self.stalls += 1;
        if self.stalls >= self.patience {
            *lr /= self.factor;
            self.stalls = 0;
            return true;
        }
        false
    }
}
