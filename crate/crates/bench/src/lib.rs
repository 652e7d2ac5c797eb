//! Fixtures shared by the benchmarks.

use nalgebra::DMatrix;
use natgrad::experiment::{gen_completion, gen_sparse, CompletionParams, SparseParams, SparseSplits};
use natgrad::model::{init, ModelKind, ModelParams, ModelSpec};
use natgrad::CompletionTask;

/// Sparse classification data at the default desk scale.
pub fn sparse() -> SparseSplits {
    gen_sparse(&SparseParams::default(), 0).expect("default sparse params are valid")
}

pub fn completion(dim: usize) -> CompletionTask {
    let params = CompletionParams {
        dim,
        rank: 2,
        n_observed: dim * dim / 3,
    };
    gen_completion(&params, 0).expect("valid completion params")
}

pub fn model(kind: ModelKind, depth: usize, dim: usize, scale: f64) -> ModelParams {
    init(&ModelSpec::new(kind, depth, dim, scale, 1).expect("valid spec")).expect("valid init")
}

/// A dense deterministic test matrix with entries in `[-1, 1]`.
pub fn dense(rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |i, j| ((i * 31 + j * 17) % 23) as f64 / 11.5 - 1.0)
}
