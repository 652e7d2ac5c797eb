//! Exact natural-gradient directions for the three parametrizations.
//!
//! Every solver returns the natural gradient `∇̃` itself, i.e. a solution of
//! `F(θ) ∇̃ = ∇_θ L` with the same sign as the Euclidean gradient. A descent
//! step is `θ ← θ − η ∇̃`; [`NatGradDirection::descent`] gives `−∇̃`.
//!
//! For the logistic objective the loss is the per-sample average and the
//! Fisher the matching sample average, so that the flow of the logits does not
//! depend on the number of samples.
//!
//! Logistic systems are solved in scale-extracted form: both sides carry a
//! common factor `exp(-u_max)` which is dropped before the solve.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{pinv_with_info, DEFAULT_RTOL};
use crate::logistic::{weighted_gram, ClassificationDataset, FisherWeighting, LogitState, ScaledTerms};
use crate::model::{JacobianView, ModelKind, ModelParams};
use crate::stable::{bernoulli_variance, sigmoid};

/// How the underdetermined diagonal-network system is split across layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiagonalSolve {
    /// Minimum-norm solution over the concatenation of all layers.
    #[default]
    Joint,
    /// Each layer independently carries `1/L` of the hypothesis-space step.
    PerLayer,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    /// Singular values below `pinv_rtol * sigma_max` are treated as zero.
    pub pinv_rtol: f64,
    /// Largest accepted relative residual of a logistic solve.
    pub residual_tol: f64,
    pub diagonal: DiagonalSolve,
    /// Factor `exp(-u_max)` out of the logistic system before solving.
    pub scale_extraction: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            pinv_rtol: DEFAULT_RTOL,
            residual_tol: 1e-8,
            diagonal: DiagonalSolve::Joint,
            scale_extraction: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NatGradDirection {
    /// Natural gradient, one block per parameter layer.
    pub blocks: Vec<DMatrix<f64>>,
    /// Relative residual of the solved system.
    pub residual: f64,
    /// Largest condition number among the pseudo-inverted operators.
    pub condition: f64,
    /// Whether any pseudo-inverted operator lost rank.
    pub rank_deficient: bool,
}

impl NatGradDirection {
    /// `−∇̃`, the velocity of natural gradient flow.
    pub fn descent(&self) -> Vec<DMatrix<f64>> {
        self.blocks.iter().map(|b| -b).collect()
    }
}

/// Scale-extracted logistic system: `M ∇̃ = b · exp(shift)`.
struct LogisticSystem {
    /// Averaged Fisher with `exp(-u_max)` removed.
    fisher: DMatrix<f64>,
    /// Averaged gradient with `exp(-u_max)` removed.
    rhs: DVector<f64>,
    /// `log` of the factor multiplying the solution once both sides are rescaled.
    shift: f64,
}

fn logistic_system(
    ds: &ClassificationDataset,
    beta: &DVector<f64>,
    weighting: FisherWeighting<'_>,
    scale_extraction: bool,
) -> Result<LogisticSystem> {
    if beta.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("hypothesis".into()));
    }
    let train = LogitState::new(ds, beta)?;
    let eval_ds = match weighting {
        FisherWeighting::Sample => ds,
        FisherWeighting::Population(p) => p,
    };
    let eval = match weighting {
        FisherWeighting::Sample => train.clone(),
        FisherWeighting::Population(p) => LogitState::new(p, beta)?,
    };
    let n = ds.n_samples() as f64;
    if scale_extraction {
        let t_train = ScaledTerms::new(&train);
        let t_eval = match weighting {
            FisherWeighting::Sample => t_train.clone(),
            FisherWeighting::Population(_) => ScaledTerms::new(&eval),
        };
        let fisher = weighted_gram(&eval_ds.signed_design(), &t_eval.fisher_weights);
        let rhs = -(ds.signed_design().tr_mul(&t_train.grad_weights)) / n;
        Ok(LogisticSystem {
            fisher,
            rhs,
            shift: t_eval.u_max - t_train.u_max,
        })
    } else {
        let w = eval.u.map(bernoulli_variance);
        let fisher = weighted_gram(&eval_ds.signed_design(), &w);
        let g = train.u.map(|u| sigmoid(-u));
        let rhs = -(ds.signed_design().tr_mul(&g)) / n;
        Ok(LogisticSystem {
            fisher,
            rhs,
            shift: 0.0,
        })
    }
}

fn relative_residual(applied: &DVector<f64>, rhs: &DVector<f64>) -> f64 {
    let scale = rhs.norm();
    let r = (applied - rhs).norm();
    if scale > 0.0 {
        r / scale
    } else {
        r
    }
}

fn check_residual(residual: f64, opts: &SolverOptions) -> Result<()> {
    if !residual.is_finite() {
        return Err(Error::NonFinite("natural-gradient residual".into()));
    }
    if residual > opts.residual_tol {
        return Err(Error::Solver {
            residual,
            tolerance: opts.residual_tol,
        });
    }
    Ok(())
}

fn column(v: DVector<f64>) -> DMatrix<f64> {
    let n = v.len();
    DMatrix::from_column_slice(n, 1, v.as_slice())
}

/// Natural gradient of the averaged logistic loss for `β = w`.
///
/// When the Fisher is singular (fewer samples than features, or a
/// rank-deficient design) the minimum-norm solution is returned.
pub fn natgrad_direct_logistic(
    ds: &ClassificationDataset,
    beta: &DVector<f64>,
    weighting: FisherWeighting<'_>,
    opts: &SolverOptions,
) -> Result<NatGradDirection> {
    let sys = logistic_system(ds, beta, weighting, opts.scale_extraction)?;
    let p = pinv_with_info(&sys.fisher, opts.pinv_rtol);
    let v = &p.matrix * &sys.rhs;
    let residual = relative_residual(&(&sys.fisher * &v), &sys.rhs);
    check_residual(residual, opts)?;
    let v = v * sys.shift.exp();
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("natural gradient".into()));
    }
    Ok(NatGradDirection {
        blocks: vec![column(v)],
        residual,
        condition: p.condition,
        rank_deficient: p.is_rank_deficient(ds.dim(), ds.dim()),
    })
}

/// Natural gradient for a diagonal network `β = w_1 ⊙ … ⊙ w_L`.
///
/// Solves `F(β) Σ_l (a_l ⊙ b_l ⊙ ∇̃_l) = ∇_β L`, by default for the
/// minimum-norm concatenation `(∇̃_1, …, ∇̃_L)`.
pub fn natgrad_diagonal_logistic(
    ds: &ClassificationDataset,
    params: &ModelParams,
    weighting: FisherWeighting<'_>,
    opts: &SolverOptions,
) -> Result<NatGradDirection> {
    match params.kind() {
        ModelKind::Diagonal | ModelKind::DirectVector => {}
        ModelKind::Matfac => return Err(Error::argument("expected a vector-valued model")),
    }
    let beta = params.collapse().to_vector();
    let sys = logistic_system(ds, &beta, weighting, opts.scale_extraction)?;
    let JacobianView::Diagonal { factors } = diagonal_factors(params) else {
        unreachable!()
    };
    let d = ds.dim();
    let depth = factors.len();

    let (blocks, condition, rank_deficient) = match opts.diagonal {
        DiagonalSolve::Joint => {
            let system = DMatrix::from_fn(d, d * depth, |i, c| {
                let (l, k) = (c / d, c % d);
                sys.fisher[(i, k)] * factors[l][k]
            });
            let p = pinv_with_info(&system, opts.pinv_rtol);
            let v = &p.matrix * &sys.rhs;
            let blocks = (0..depth)
                .map(|l| DVector::from_fn(d, |k, _| v[l * d + k]))
                .collect::<Vec<_>>();
            (blocks, p.condition, p.is_rank_deficient(d, d * depth))
        }
        DiagonalSolve::PerLayer => {
            let share = &sys.rhs / depth as f64;
            let mut cond = 1.0f64;
            let mut deficient = false;
            let blocks = factors
                .iter()
                .map(|f| {
                    let system = DMatrix::from_fn(d, d, |i, k| sys.fisher[(i, k)] * f[k]);
                    let p = pinv_with_info(&system, opts.pinv_rtol);
                    cond = cond.max(p.condition);
                    deficient |= p.is_rank_deficient(d, d);
                    &p.matrix * &share
                })
                .collect::<Vec<_>>();
            (blocks, cond, deficient)
        }
    };

    let hyp_step = blocks
        .iter()
        .zip(&factors)
        .fold(DVector::zeros(d), |acc, (v, f)| acc + v.component_mul(f));
    let residual = relative_residual(&(&sys.fisher * hyp_step), &sys.rhs);
    check_residual(residual, opts)?;
    let factor = sys.shift.exp();
    let blocks: Vec<_> = blocks.into_iter().map(|v| column(v * factor)).collect();
    if blocks.iter().any(|b| b.iter().any(|x| !x.is_finite())) {
        return Err(Error::NonFinite("natural gradient".into()));
    }
    Ok(NatGradDirection {
        blocks,
        residual,
        condition,
        rank_deficient,
    })
}

fn diagonal_factors(params: &ModelParams) -> JacobianView {
    match params.jacobian() {
        JacobianView::Identity { dim } => JacobianView::Diagonal {
            factors: vec![DVector::from_element(dim, 1.0)],
        },
        view => view,
    }
}

/// Natural gradient for `β = W_1 ⋯ W_L` under an identity Fisher on `β`.
///
/// Each layer carries `1/L` of the hypothesis-space gradient:
/// `∇̃_{W_l} = (1/L) A_l⁺ G B_l⁺` with `A_l = W_1⋯W_{l−1}` and
/// `B_l = W_{l+1}⋯W_L`, which solves `(B_lᵀ ⊗ A_l) vec(∇̃_l) = vec(G)/L`.
pub fn natgrad_matfac(
    params: &ModelParams,
    grad_beta: &DMatrix<f64>,
    opts: &SolverOptions,
) -> Result<NatGradDirection> {
    if params.kind() != ModelKind::Matfac {
        return Err(Error::argument("expected a matfac model"));
    }
    let d = params.spec().dim;
    if grad_beta.shape() != (d, d) {
        return Err(Error::shape("gradient must be D x D"));
    }
    let JacobianView::Matfac { pairs } = params.jacobian() else {
        unreachable!()
    };
    let depth = pairs.len() as f64;
    let mut condition = 1.0f64;
    let mut rank_deficient = false;
    let blocks: Vec<DMatrix<f64>> = pairs
        .iter()
        .map(|(a, b)| {
            let pa = pinv_with_info(a, opts.pinv_rtol);
            let pb = pinv_with_info(b, opts.pinv_rtol);
            condition = condition.max(pa.condition).max(pb.condition);
            rank_deficient |= pa.is_rank_deficient(d, d) || pb.is_rank_deficient(d, d);
            &pa.matrix * grad_beta * &pb.matrix / depth
        })
        .collect();
    let reconstructed = pairs
        .iter()
        .zip(&blocks)
        .fold(DMatrix::zeros(d, d), |acc, ((a, b), v)| acc + a * v * b);
    let gnorm = grad_beta.norm();
    let rnorm = (reconstructed - grad_beta).norm();
    let residual = if gnorm > 0.0 { rnorm / gnorm } else { rnorm };
    Ok(NatGradDirection {
        blocks,
        residual,
        condition,
        rank_deficient,
    })
}
