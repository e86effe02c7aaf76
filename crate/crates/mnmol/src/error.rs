//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised when decoding an array container.
///
/// Each malformed-input class gets its own kind so callers (and fuzzers) can
/// distinguish a bad magic from a truncated payload.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum ContainerError {
    #[error("bad magic {found:?}, expected \"MNM1\"")]
    BadMagic { found: [u8; 4] },
    #[error("unknown dtype code {0}")]
    UnknownDtype(u8),
    #[error("truncated container: needed {needed} bytes, got {got}")]
    Truncated { needed: usize, got: usize },
    #[error("too many dimensions: {0} (limit 8)")]
    TooManyDims(u8),
    #[error("dimension product overflows")]
    DimOverflow,
    #[error("payload length mismatch: expected {expected} bytes, got {got}")]
    LengthMismatch { expected: usize, got: usize },
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("gradient root must be a scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },

    #[error("reciprocal of a (near-)zero entry")]
    RecipOfZero,

    #[error("conjugate gradient did not reach tol in {iters} iterations (residual {residual:.3e})")]
    CgNoConvergence { residual: f64, iters: usize },

    #[error("operator is not positive definite (p'Ap = {0:.3e})")]
    NotPositiveDefinite(f64),

    #[error("fixed-point iteration diverged after {iterations} iterations (residual grew {growth:.2}x)")]
    Divergence {
        iterations: usize,
        growth: f64,
        residuals: Vec<f64>,
    },

    #[error("forward iteration stopped at residual {residual:.3e} > tol {tol:.3e}")]
    NoConvergence { residual: f64, tol: f64 },

    #[error("adjoint fixed-point iteration did not converge (residual {residual:.3e} after {iters} iterations)")]
    AdjointNoConvergence { residual: f64, iters: usize },

    #[error("power iteration did not converge (relative change {0:.3e} > 1e-6)")]
    PowerIterationNoConvergence(f64),

    #[error("ascent pair collapsed more than {0} times")]
    CollisionLimit(usize),

    #[error("degenerate probe pair: z1 == z2")]
    DegeneratePair,

    #[error("k-space data is bound to a different measurement model")]
    ModelMismatch,

    #[error("empty dataset")]
    EmptyDataset,

    #[error("training aborted at epoch {epoch}: {failures}/{samples} samples failed")]
    TrainingAborted {
        epoch: usize,
        failures: usize,
        samples: usize,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Container(#[from] ContainerError),

    #[error("config parse error: {0}")]
    ConfigParse(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }
}
