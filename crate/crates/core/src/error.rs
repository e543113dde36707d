use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("bad magic bytes: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("dimension overflow: {0:?} does not describe an addressable volume")]
    DimensionOverflow([u64; 3]),

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("unsupported NIfTI datatype code {0}")]
    UnsupportedDatatype(i16),

    #[error("expected a single 3D frame, header describes {0} dimensions")]
    NotThreeD(usize),

    #[error("dimension mismatch: {0:?} vs {1:?}")]
    DimMismatch([usize; 3], [usize; 3]),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("non-finite value at index {0}")]
    NonFinite(usize),

    #[error("mask is empty")]
    EmptyMask,

    #[error("zero variance input")]
    ZeroVariance,

    #[error("zero norm reference: {0}")]
    ZeroNorm(&'static str),

    #[error("structure '{0}' does not fit inside the grid")]
    OutOfBounds(String),

    #[error("solver diverged: residual {residual:.3e} exceeds 10x best {best:.3e} at iteration {iteration}")]
    Divergence { iteration: usize, residual: f64, best: f64 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("malformed document: {0}")]
    Parse(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
