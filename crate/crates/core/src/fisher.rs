use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

/// Which data distribution the outer Fisher expectation runs over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightingKind {
    #[default]
    Sample,
    Population,
}

#[derive(Debug, Clone)]
pub enum FisherOperator {
    Dense(DMatrix<f64>),
    /// `scale * I` on a space of the given dimension, never materialized.
    ScaledIdentity { dim: usize, scale: f64 },
}

/// A Fisher information matrix stored as `exp(scale_log) * operator`.
///
/// Keeping the exponent apart lets late-training systems, whose entries are
/// all of order `exp(-u_max)`, be solved in representable range.
#[derive(Debug, Clone)]
pub struct FisherSystem {
    pub operator: FisherOperator,
    pub scale_log: f64,
    pub weighting: WeightingKind,
}

impl FisherSystem {
    pub fn dim(&self) -> usize {
        match &self.operator {
            FisherOperator::Dense(m) => m.nrows(),
            FisherOperator::ScaledIdentity { dim, .. } => *dim,
        }
    }

    /// The scale-extracted operator as a dense matrix.
    pub fn scaled_matrix(&self) -> DMatrix<f64> {
        match &self.operator {
            FisherOperator::Dense(m) => m.clone(),
            FisherOperator::ScaledIdentity { dim, scale } => DMatrix::identity(*dim, *dim) * *scale,
        }
    }

    /// The actual Fisher matrix, `exp(scale_log) * operator`.
    pub fn true_matrix(&self) -> DMatrix<f64> {
        self.scaled_matrix() * self.scale_log.exp()
    }

    /// Apply the true Fisher to a column vector or, for the identity form,
    /// to a matrix-shaped hypothesis.
    pub fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let factor = self.scale_log.exp();
        match &self.operator {
            FisherOperator::Dense(m) => m * x * factor,
            FisherOperator::ScaledIdentity { scale, .. } => x * (scale * factor),
        }
    }
}
