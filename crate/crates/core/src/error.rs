use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    /// The top-layer quadratic (potential curvature plus loss curvature) is
    /// not positive, so the block subproblem has no minimizer.
    #[error("non-positive curvature {curvature} in the output-layer subproblem")]
    NonPositiveCurvature { curvature: f64 },

    #[error("inference diverged: non-finite activity after sweep {sweep}")]
    Diverged { sweep: usize },

    #[error("invalid specification: {0}")]
    InvalidSpec(String),

    #[error("power iteration did not converge after {iters} iterations")]
    NoConvergence { iters: usize },

    #[error("bad IDX magic number {magic:#010x} in {path}")]
    BadMagic { path: PathBuf, magic: u32 },

    #[error("IDX file {path} is truncated: expected {expected} bytes, found {found}")]
    TruncatedFile {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("IDX dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("pool of {pool} samples cannot supply {requested} disjoint samples")]
    InsufficientPool { pool: usize, requested: usize },

    #[error("label {label} out of range for {num_classes} classes")]
    OutOfRange { label: usize, num_classes: usize },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
