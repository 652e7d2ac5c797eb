//! Deterministic synthetic datasets and completion tasks.

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::CompletionTask;
use crate::logistic::ClassificationDataset;

/// Layout of the two-dimensional classification set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarginGeometry {
    /// Positive points lie on the rays through `(1, 1)` and `(2, −0.5)`,
    /// negatives are their mirror images. The axis separator `e₁` has the
    /// best `ℓ½`-normalized margin; the `ℓ₂` margin direction is
    /// `(3, 2)/√13`, with both support points active.
    #[default]
    AxisVsOblique,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Toy2dParams {
    #[serde(default = "default_n_per_class")]
    pub n_per_class: usize,
    #[serde(default)]
    pub margin_geometry: MarginGeometry,
    /// Points beyond the two support points sit at distance `1 + spread·U(0,1)`
    /// along their ray.
    #[serde(default = "default_spread")]
    pub spread: f64,
}

fn default_n_per_class() -> usize {
    20
}

fn default_spread() -> f64 {
    2.0
}

impl Default for Toy2dParams {
    fn default() -> Self {
        Toy2dParams {
            n_per_class: default_n_per_class(),
            margin_geometry: MarginGeometry::default(),
            spread: default_spread(),
        }
    }
}

/// The two rays carrying the positive class.
pub const TOY2D_RAYS: [[f64; 2]; 2] = [[1.0, 1.0], [2.0, -0.5]];

pub fn gen_toy2d(params: &Toy2dParams, seed: u64) -> Result<ClassificationDataset> {
    let n = params.n_per_class;
    if n < 2 {
        return Err(Error::argument("toy2d needs at least 2 points per class"));
    }
    if !(params.spread.is_finite() && params.spread >= 0.0) {
        return Err(Error::argument("spread must be non-negative"));
    }
    let MarginGeometry::AxisVsOblique = params.margin_geometry;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = DMatrix::zeros(2 * n, 2);
    let mut y = DVector::zeros(2 * n);
    for i in 0..n {
        let ray = TOY2D_RAYS[i % 2];
        // the first point on each ray is the support point itself
        let scale = if i < 2 { 1.0 } else { 1.0 + params.spread * rng.random::<f64>() };
        for c in 0..2 {
            x[(i, c)] = scale * ray[c];
            x[(n + i, c)] = -scale * ray[c];
        }
        y[i] = 1.0;
        y[n + i] = -1.0;
    }
    ClassificationDataset::new(x, y)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SparseParams {
    #[serde(default = "default_sparse_dim")]
    pub dim: usize,
    #[serde(default = "default_sparsity")]
    pub sparsity: usize,
    #[serde(default = "default_n_train")]
    pub n_train: usize,
    #[serde(default = "default_n_test")]
    pub n_test: usize,
    #[serde(default = "default_n_population")]
    pub n_population: usize,
}

fn default_sparse_dim() -> usize {
    50
}
fn default_sparsity() -> usize {
    5
}
fn default_n_train() -> usize {
    25
}
fn default_n_test() -> usize {
    2000
}
fn default_n_population() -> usize {
    2000
}

impl Default for SparseParams {
    fn default() -> Self {
        SparseParams {
            dim: default_sparse_dim(),
            sparsity: default_sparsity(),
            n_train: default_n_train(),
            n_test: default_n_test(),
            n_population: default_n_population(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SparseSplits {
    pub train: ClassificationDataset,
    pub test: ClassificationDataset,
    pub population: ClassificationDataset,
    pub ground_truth: DVector<f64>,
}

/// Standard Gaussian features labelled by `sign(xᵀβ†)` with
/// `β† = (1, …, 1, 0, …, 0)` carrying `sparsity` ones.
pub fn gen_sparse(params: &SparseParams, seed: u64) -> Result<SparseSplits> {
    let d = params.dim;
    if d == 0 || params.sparsity == 0 || params.sparsity > d {
        return Err(Error::argument("sparsity must lie in 1..=dim"));
    }
    if params.n_train == 0 || params.n_test == 0 || params.n_population == 0 {
        return Err(Error::argument("every split needs at least one sample"));
    }
    let truth = DVector::from_fn(d, |i, _| if i < params.sparsity { 1.0 } else { 0.0 });
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = |n: usize| -> Result<ClassificationDataset> {
        let mut x = DMatrix::zeros(n, d);
        let mut y = DVector::zeros(n);
        for r in 0..n {
            loop {
                let row: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
                let s: f64 = row[..params.sparsity].iter().sum();
                if s != 0.0 {
                    for (c, v) in row.into_iter().enumerate() {
                        x[(r, c)] = v;
                    }
                    y[r] = s.signum();
                    break;
                }
            }
        }
        ClassificationDataset::new(x, y)
    };
    Ok(SparseSplits {
        train: split(params.n_train)?,
        test: split(params.n_test)?,
        population: split(params.n_population)?,
        ground_truth: truth,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompletionParams {
    #[serde(default = "default_completion_dim")]
    pub dim: usize,
    #[serde(default = "default_rank")]
    pub rank: usize,
    #[serde(default = "default_n_observed")]
    pub n_observed: usize,
}

fn default_completion_dim() -> usize {
    20
}
fn default_rank() -> usize {
    2
}
fn default_n_observed() -> usize {
    120
}

impl Default for CompletionParams {
    fn default() -> Self {
        CompletionParams {
            dim: default_completion_dim(),
            rank: default_rank(),
            n_observed: default_n_observed(),
        }
    }
}

/// Target `U V / √R` with Gaussian `U` (D×R) and `V` (R×D); `n_observed`
/// entries drawn uniformly without replacement.
pub fn gen_completion(params: &CompletionParams, seed: u64) -> Result<CompletionTask> {
    let (d, r) = (params.dim, params.rank);
    if d == 0 || r == 0 || r > d {
        return Err(Error::argument("rank must lie in 1..=dim"));
    }
    if params.n_observed == 0 || params.n_observed > d * d {
        return Err(Error::argument("n_observed must lie in 1..=dim²"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gauss = |rows, cols| DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng));
    let u: DMatrix<f64> = gauss(d, r);
    let v: DMatrix<f64> = gauss(r, d);
    let target = u * v / (r as f64).sqrt();
    let mut mask = DMatrix::from_element(d, d, false);
    for k in sample(&mut rng, d * d, params.n_observed) {
        // column-major flat index
        mask[(k % d, k / d)] = true;
    }
    CompletionTask::new(target, mask)
}
