//! Logistic loss on binary classification data, in logit and hypothesis space.
//!
//! Notation follows the usual signed-data convention: `X̃ = y ⊙ X` scales each
//! row by its label and `u = X̃ β` holds the signed margins.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fisher::{FisherOperator, FisherSystem, WeightingKind};
use crate::stable::{bernoulli_variance, log_sigmoid, sigmoid, softplus};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationDataset {
    x: DMatrix<f64>,
    y: DVector<f64>,
}

impl ClassificationDataset {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(Error::shape(format!(
                "X has {} rows but y has {} labels",
                x.nrows(),
                y.len()
            )));
        }
        if x.nrows() == 0 || x.ncols() == 0 {
            return Err(Error::argument("dataset must be non-empty"));
        }
        if let Some(bad) = y.iter().find(|&&v| v != 1.0 && v != -1.0) {
            return Err(Error::argument(format!("labels must be ±1, found {bad}")));
        }
        if let Some(row) = (0..x.nrows()).find(|&n| x.row(n).iter().all(|&v| v == 0.0)) {
            return Err(Error::argument(format!("row {row} of X is zero")));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("design matrix".into()));
        }
        Ok(ClassificationDataset { x, y })
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn n_samples(&self) -> usize {
        self.x.nrows()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    /// `X̃ = y ⊙ X`, each row multiplied by its label.
    pub fn signed_design(&self) -> DMatrix<f64> {
        let mut xt = self.x.clone();
        for (n, mut row) in xt.row_iter_mut().enumerate() {
            row *= self.y[n];
        }
        xt
    }

    /// The same labels with the design replaced by `X Aᵀ`.
    pub fn transformed(&self, a: &DMatrix<f64>) -> Result<Self> {
        if a.shape() != (self.dim(), self.dim()) {
            return Err(Error::shape("transform must be D x D"));
        }
        Self::new(&self.x * a.transpose(), self.y.clone())
    }

    fn check_beta(&self, beta: &DVector<f64>) -> Result<()> {
        if beta.len() != self.dim() {
            return Err(Error::shape(format!(
                "beta has length {} but data has {} features",
                beta.len(),
                self.dim()
            )));
        }
        Ok(())
    }

    /// Fraction of points with `y_n x_nᵀ β > 0`.
    pub fn accuracy(&self, beta: &DVector<f64>) -> f64 {
        let s = &self.x * beta;
        let correct = s.iter().zip(self.y.iter()).filter(|(s, y)| *s * *y > 0.0).count();
        correct as f64 / self.n_samples() as f64
    }
}

/// Logits `s = X β`, signed margins `u = y ⊙ s` and their maximum.
#[derive(Debug, Clone)]
pub struct LogitState {
    pub s: DVector<f64>,
    pub u: DVector<f64>,
    pub u_max: f64,
}

impl LogitState {
    pub fn new(ds: &ClassificationDataset, beta: &DVector<f64>) -> Result<Self> {
        ds.check_beta(beta)?;
        Ok(Self::from_logits(&(ds.x() * beta), ds.y()))
    }

    pub fn from_logits(s: &DVector<f64>, y: &DVector<f64>) -> Self {
        let u = s.component_mul(y);
        let u_max = u.max();
        LogitState { s: s.clone(), u, u_max }
    }
}

/// `Σ_n softplus(-u_n)`.
pub fn loss(ds: &ClassificationDataset, beta: &DVector<f64>) -> Result<f64> {
    let state = LogitState::new(ds, beta)?;
    Ok(state.u.iter().map(|&u| softplus(-u)).sum())
}

/// Gradient of the loss with respect to the logits: `-y_i (1 - φ(y_i s_i))`.
pub fn grad_logits(state: &LogitState, y: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(y.len(), |i, _| -y[i] * sigmoid(-state.u[i]))
}

/// Diagonal of the logit-space Fisher, `φ(s_i) φ(-s_i)`.
pub fn fisher_logits(state: &LogitState) -> DVector<f64> {
    state.s.map(bernoulli_variance)
}

/// Exact gradient `∇_β L = -X̃ᵀ φ(-u)`.
pub fn grad_beta(ds: &ClassificationDataset, beta: &DVector<f64>) -> Result<DVector<f64>> {
    let state = LogitState::new(ds, beta)?;
    let weights = state.u.map(|u| sigmoid(-u));
    Ok(-(ds.signed_design().tr_mul(&weights)))
}

/// Data used for the outer expectation of the Fisher.
#[derive(Debug, Clone, Copy)]
pub enum FisherWeighting<'a> {
    Sample,
    Population(&'a ClassificationDataset),
}

impl FisherWeighting<'_> {
    pub fn kind(&self) -> WeightingKind {
        match self {
            FisherWeighting::Sample => WeightingKind::Sample,
            FisherWeighting::Population(_) => WeightingKind::Population,
        }
    }
}

/// Per-sample terms of the scale-extracted Fisher and gradient.
///
/// With `u_max` factored out, the Fisher is `exp(-u_max) X̃ᵀ diag(w) X̃` and
/// the gradient is `-exp(-u_max) X̃ᵀ g` with
/// `w_n = exp(-u_n + u_max) φ(u_n)^2` and `g_n = exp(-u_n + u_max) φ(u_n)`.
#[derive(Debug, Clone)]
pub struct ScaledTerms {
    pub fisher_weights: DVector<f64>,
    pub grad_weights: DVector<f64>,
    pub u_max: f64,
}

impl ScaledTerms {
    pub fn new(state: &LogitState) -> Self {
        let u_max = state.u_max;
        // evaluated in the log domain so neither factor overflows on its own
        let fisher_weights = state.u.map(|u| (-u + u_max + 2.0 * log_sigmoid(u)).exp());
        let grad_weights = state.u.map(|u| (-u + u_max + log_sigmoid(u)).exp());
        ScaledTerms {
            fisher_weights,
            grad_weights,
            u_max,
        }
    }
}

/// `(1/N) X̃ᵀ diag(w) X̃`, symmetrized.
pub(crate) fn weighted_gram(xt: &DMatrix<f64>, w: &DVector<f64>) -> DMatrix<f64> {
    let mut scaled = xt.clone();
    for (n, mut row) in scaled.row_iter_mut().enumerate() {
        row *= w[n].sqrt();
    }
    let g = scaled.tr_mul(&scaled) / xt.nrows() as f64;
    (&g + g.transpose()) * 0.5
}

/// Averaged Fisher `(1/N) Xᵀ diag[φ(u) φ(-u)] X` in scale-extracted form.
pub fn fisher_beta(
    ds: &ClassificationDataset,
    beta: &DVector<f64>,
    weighting: FisherWeighting<'_>,
) -> Result<FisherSystem> {
    let eval = match weighting {
        FisherWeighting::Sample => ds,
        FisherWeighting::Population(p) => {
            if p.dim() != ds.dim() {
                return Err(Error::shape("population data has a different dimension"));
            }
            p
        }
    };
    let state = LogitState::new(eval, beta)?;
    if !state.u_max.is_finite() {
        return Err(Error::NonFinite("margins".into()));
    }
    let terms = ScaledTerms::new(&state);
    let matrix = weighted_gram(&eval.signed_design(), &terms.fisher_weights);
    Ok(FisherSystem {
        operator: FisherOperator::Dense(matrix),
        scale_log: -terms.u_max,
        weighting: weighting.kind(),
    })
}
