use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor};
use crate::error::Result;

/// Added to the denominator of the relative error.
const REL_EPS: f64 = 1e-12;

/// Outcome of comparing autodiff gradients with central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `max |g_ad - g_fd| / (|g_ad| + |g_fd| + eps)` for each input.
    pub max_rel_error: Vec<f64>,
    /// Flat element index attaining the maximum, per input.
    pub worst_index: Vec<usize>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error.iter().all(|&e| e < self.tol)
    }

    pub fn overall_max(&self) -> f64 {
        self.max_rel_error.iter().copied().fold(0.0, f64::max)
    }
}

pub fn relative_error(ad: f64, fd: f64) -> f64 {
    (ad - fd).abs() / (ad.abs() + fd.abs() + REL_EPS)
}

/// Checks `f` against central finite differences with step `h`.
///
/// Non-scalar outputs are reduced with a fixed pseudo-random weighting so
/// every output element contributes. `f` must be deterministic.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let tape = Tape::new();
    let leaves: Vec<Tensor<f64>> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = f(&leaves)?;
    let weights = projection(out.shape());
    let loss = out.mul(&weights)?.sum_all()?;
    let grads = loss.backward()?;

    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let out = f(xs)?;
        Ok(out
            .data()
            .iter()
            .zip(weights.data())
            .map(|(a, b)| a * b)
            .sum())
    };

    let mut max_rel_error = Vec::with_capacity(inputs.len());
    let mut worst_index = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor<f64>> = inputs.iter().map(Tensor::detach).collect();
    for (i, leaf) in leaves.iter().enumerate() {
        let ad = grads
            .get_data(leaf)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; leaf.numel()]);
        let base = inputs[i].to_vec();
        let (mut worst, mut at) = (0.0f64, 0usize);
        for j in 0..base.len() {
            let mut plus = base.clone();
            plus[j] += h;
            work[i] = Tensor::from_vec(inputs[i].shape().to_vec(), plus)?;
            let fp = eval(&work)?;
            let mut minus = base.clone();
            minus[j] -= h;
            work[i] = Tensor::from_vec(inputs[i].shape().to_vec(), minus)?;
            let fm = eval(&work)?;
            let fd = (fp - fm) / (2.0 * h);
            let err = relative_error(ad[j], fd);
            if err > worst {
                worst = err;
                at = j;
            }
        }
        work[i] = inputs[i].detach();
        max_rel_error.push(worst);
        worst_index.push(at);
    }
    Ok(GradCheckReport {
        max_rel_error,
        worst_index,
        tol,
    })
}

fn projection(shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
    let w = (0..n)
        .map(|_| {
            let mag = rng.random_range(0.5..1.5);
            if rng.random_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::from_vec(shape.to_vec(), w).expect("projection shape")
}
