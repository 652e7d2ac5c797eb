//! Synthetic data, experiment configuration and grid execution.

pub mod config;
pub mod generators;
pub mod runner;

pub use config::{DataParams, ExperimentConfig, ExperimentKind, GridEntry, NtkParams};
pub use generators::{gen_completion, gen_sparse, gen_toy2d, CompletionParams, SparseParams, SparseSplits, Toy2dParams};
pub use runner::{
    cell_init, generate, load_panels, report, run_experiment, write_generated, CellEntry, CellStatus, ExperimentReport,
    GeneratedData, Manifest, RunOptions,
};
