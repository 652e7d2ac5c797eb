use thiserror::Error;

/// Errors produced by the models, solvers and experiment harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    /// A natural-gradient solve whose relative residual exceeded the tolerance.
    #[error("linear solve residual {residual:.3e} exceeds tolerance {tolerance:.3e}")]
    Solver { residual: f64, tolerance: f64 },

    #[error("dataset is not separable: {0}")]
    Infeasible(String),

    #[error("unsupported regime: {0}")]
    Unsupported(String),

    #[error("argument outside domain: {0}")]
    Domain(String),

    /// A failure inside an optimization run, tagged with the step it occurred at.
    #[error("run failed at step {step}: {source}")]
    Run {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn argument(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    /// Tag an error with the optimization step it occurred at.
    pub(crate) fn at_step(self, step: usize) -> Self {
        Error::Run {
            step,
            source: Box::new(self),
        }
    }

    /// Step index attached to a run failure, if any.
    pub fn step(&self) -> Option<usize> {
        match self {
            Error::Run { step, .. } => Some(*step),
            _ => None,
        }
    }
}
