//! Crate-wide error type and result alias.

use thiserror::Error;

/// Errors produced by model construction, inference, and the data/IO layer.
#[derive(Error, Debug)]
pub enum Error {
    /// Inputs whose shapes do not line up with the operation's contract.
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: String,
        actual: String,
    },

    /// A parameter value outside its legal domain (non-positive variance,
    /// zero-depth request where depth must be positive, and so on).
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// A planar layer whose normal vector has collapsed to (numerically) zero.
    #[error("degenerate planar layer: ||w|| = {norm:.3e} below threshold")]
    DegenerateLayer { norm: f64 },

    /// Cholesky factorization failed even at the maximum jitter level.
    #[error("Cholesky failed for {size}x{size} matrix (final jitter {jitter:.3e})")]
    CholeskyFailed { size: usize, jitter: f64 },

    /// Flow inversion did not reach the requested tolerance.
    #[error("flow inversion residual {residual:.3e} exceeds tolerance {tol:.3e}")]
    InversionFailed { residual: f64, tol: f64 },

    /// A trajectory left the trust region during integration. `segment` is
    /// set when the failure happened inside a shooting segment.
    #[error("trajectory diverged at t = {time:.6}{}: state norm {norm:.3e}", segment.map(|s| format!(" (segment {s})")).unwrap_or_default())]
    Divergence {
        time: f64,
        norm: f64,
        segment: Option<usize>,
    },

    /// A numerical result outside its mathematically valid range.
    #[error("numerical failure: {0}")]
    Numerics(String),

    /// Optimization aborted after repeated divergent steps.
    #[error("training failed at step {step}: {details}")]
    TrainingFailure { step: usize, details: String },

    /// A dataset with no usable observations.
    #[error("empty data: {0}")]
    EmptyData(String),

    /// Malformed observation CSV; `line` is 1-based and counts the header.
    #[error("CSV parse error at line {line}: {msg}")]
    CsvParse { line: usize, msg: String },

    /// Invalid or inconsistent experiment configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Checkpoint that cannot be trusted: bad version, digest, or encoding.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Unknown name passed to a registry lookup.
    #[error("unknown {kind} '{name}' (known: {known})")]
    UnknownName {
        kind: &'static str,
        name: String,
        known: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Convenience constructor for shape errors.
    pub fn dim(context: &'static str, expected: impl Into<String>, actual: impl Into<String>) -> Self {
        Error::DimensionMismatch {
            context,
            expected: expected.into(),
            actual: actual.into(),
        }
    }
}
