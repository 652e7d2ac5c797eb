//! Exact natural gradient descent for deep linear models.
//!
//! The crate provides three parametrizations of a linear hypothesis (the
//! direct vector, diagonal networks and deep matrix factorizations), exact
//! natural-gradient solvers for logistic classification and matrix
//! completion, closed-form reference solutions, a gradient-flow runner and
//! a neural-tangent-kernel probe.

pub mod error;
pub mod experiment;
pub mod fisher;
pub mod flow;
pub mod gaussian;
pub mod linalg;
pub mod logistic;
pub mod model;
pub mod natgrad;
pub mod ntk;
pub mod reference;
pub mod stable;

pub use error::{Error, Result};
pub use fisher::{FisherOperator, FisherSystem, WeightingKind};
pub use gaussian::CompletionTask;
pub use logistic::{ClassificationDataset, FisherWeighting};
pub use model::{Hypothesis, JacobianView, ModelKind, ModelParams, ModelSpec};
pub use natgrad::{DiagonalSolve, NatGradDirection, SolverOptions};
