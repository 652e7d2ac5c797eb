//! Squared-error matrix completion under an isotropic Gaussian observation model.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fisher::{FisherOperator, FisherSystem, WeightingKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionTask {
    target: DMatrix<f64>,
    mask: DMatrix<bool>,
    noise_sigma: f64,
}

impl CompletionTask {
    pub fn new(target: DMatrix<f64>, mask: DMatrix<bool>) -> Result<Self> {
        Self::with_noise(target, mask, 1.0)
    }

    pub fn with_noise(target: DMatrix<f64>, mask: DMatrix<bool>, noise_sigma: f64) -> Result<Self> {
        if target.shape() != mask.shape() {
            return Err(Error::shape("target and mask differ in shape"));
        }
        if !target.is_square() {
            return Err(Error::shape("only square completion tasks are supported"));
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::argument("at least one entry must be observed"));
        }
        if !(noise_sigma.is_finite() && noise_sigma > 0.0) {
            return Err(Error::argument("noise_sigma must be positive"));
        }
        Ok(CompletionTask {
            target,
            mask,
            noise_sigma,
        })
    }

    /// A task observing the single entry `probe` with value `value`.
    pub fn single_observation(dim: usize, probe: (usize, usize), value: f64) -> Result<Self> {
        if probe.0 >= dim || probe.1 >= dim {
            return Err(Error::argument("probe outside the matrix"));
        }
        let mut target = DMatrix::zeros(dim, dim);
        target[probe] = value;
        let mut mask = DMatrix::from_element(dim, dim, false);
        mask[probe] = true;
        Self::new(target, mask)
    }

    pub fn target(&self) -> &DMatrix<f64> {
        &self.target
    }

    pub fn mask(&self) -> &DMatrix<bool> {
        &self.mask
    }

    pub fn noise_sigma(&self) -> f64 {
        self.noise_sigma
    }

    pub fn dim(&self) -> usize {
        self.target.nrows()
    }

    pub fn n_observed(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    fn check(&self, beta: &DMatrix<f64>) -> Result<()> {
        if beta.shape() != self.target.shape() {
            return Err(Error::shape(format!(
                "hypothesis is {:?}, task is {:?}",
                beta.shape(),
                self.target.shape()
            )));
        }
        Ok(())
    }

    /// Mean squared error over observed (`observed = true`) or unobserved entries.
    pub fn mse(&self, beta: &DMatrix<f64>, observed: bool) -> f64 {
        let mut sum = 0.0;
        let mut count = 0usize;
        for ((b, t), &m) in beta.iter().zip(self.target.iter()).zip(self.mask.iter()) {
            if m == observed {
                sum += (b - t) * (b - t);
                count += 1;
            }
        }
        if count == 0 {
            0.0
        } else {
            sum / count as f64
        }
    }
}

/// `½ Σ_{observed} (β_ij − target_ij)²`.
pub fn mc_loss(task: &CompletionTask, beta: &DMatrix<f64>) -> Result<f64> {
    task.check(beta)?;
    Ok(0.5
        * beta
            .iter()
            .zip(task.target.iter())
            .zip(task.mask.iter())
            .filter(|(_, &m)| m)
            .map(|((b, t), _)| (b - t) * (b - t))
            .sum::<f64>())
}

/// `β − target` on observed entries, zero elsewhere.
pub fn mc_grad(task: &CompletionTask, beta: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    task.check(beta)?;
    Ok(DMatrix::from_fn(beta.nrows(), beta.ncols(), |i, j| {
        if task.mask[(i, j)] {
            beta[(i, j)] - task.target[(i, j)]
        } else {
            0.0
        }
    }))
}

/// Fisher of the Gaussian mean, `I / σ_n²` over the `D²` entries.
pub fn fisher_gaussian(task: &CompletionTask) -> FisherSystem {
    let d = task.dim();
    FisherSystem {
        operator: FisherOperator::ScaledIdentity {
            dim: d * d,
            scale: 1.0 / (task.noise_sigma * task.noise_sigma),
        },
        scale_log: 0.0,
        weighting: WeightingKind::Sample,
    }
}

/// Natural gradient of `mc_loss` with respect to the hypothesis itself:
/// `F⁻¹ ∇ = σ_n² · mc_grad`.
pub fn natural_grad_beta(task: &CompletionTask, beta: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let s2 = task.noise_sigma * task.noise_sigma;
    Ok(mc_grad(task, beta)? * s2)
}
