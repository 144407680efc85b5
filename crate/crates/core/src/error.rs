//! Crate-wide error type.
//!
//! Library entry points return `Result<T, Error>`. Variants are grouped by
//! failure mode rather than by module so that higher-level routines (fitting,
//! selection, bootstrap) can propagate lower-level failures without wrapping.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("invalid basis: {reason}")]
    InvalidBasis { reason: String },

    #[error("invalid domain: lo = {lo} must be strictly below hi = {hi}")]
    InvalidDomain { lo: f64, hi: f64 },

    #[error("invalid argument for {what}: {reason}")]
    InvalidArgument { what: String, reason: String },

    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: String,
        expected: usize,
        got: usize,
    },

    #[error("invalid model specification: {reason}")]
    InvalidSpec { reason: String },

    #[error("parameter out of range for block {block}: {reason}")]
    ParameterOutOfRange { block: usize, reason: String },

    #[error("invalid data: {reason}")]
    InvalidData { reason: String },

    #[error("encounter history {id:?} is invalid: {reason}")]
    InvalidHistory { id: String, reason: String },

    #[error("data/regime mismatch: {reason}")]
    RegimeMismatch { reason: String },

    #[error("fitting failed: {reason}")]
    FitFailed { reason: String },

    #[error(
        "penalized information matrix is numerically singular \
         (condition number {cond:.3e} exceeds {limit:.1e}); \
         effective degrees of freedom are unavailable"
    )]
    SingularInformation { cond: f64, limit: f64 },

    #[error("smoothing selection failed: {reason}")]
    SelectionFailed { reason: String },

    #[error(
        "bootstrap failed: {failed} of {total} replicate refits did not converge, \
         which exceeds the 10% tolerance"
    )]
    BootstrapFailed { failed: usize, total: usize },

    #[error(
        "simultaneous band failed: the widest allowed band contains only a fraction \
         {achieved:.4} of replicate curves, below the requested level {level}"
    )]
    BandCoverage { achieved: f64, level: f64 },

    #[error("simulation failed: {reason}")]
    SimulationFailed { reason: String },

    #[error("{path}:{line}: {reason}")]
    ParseRow {
        path: String,
        line: u64,
        reason: String,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("CSV error on {path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },

    #[error("JSON error on {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("unsupported schema_version {found} in {path} (this build reads version {supported})")]
    SchemaVersion {
        path: String,
        found: u32,
        supported: u32,
    },
}
