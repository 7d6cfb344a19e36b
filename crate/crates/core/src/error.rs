//! Error type shared across the crate.

use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("non-finite value at {context}")]
    NonFinite { context: String },

    #[error("shape mismatch: {context}")]
    Shape { context: String },

    #[error("{what} {index} out of range for length {len}")]
    IndexOutOfRange {
        index: usize,
        len: usize,
        what: &'static str,
    },

    #[error("gamma must lie in [0, 1], got {0}")]
    InvalidGamma(f64),

    #[error("rho must lie in (0, 1], got {0}")]
    InvalidRho(f64),

    #[error("floor {floor} exceeds layer length {len} at layer {layer}")]
    InvalidFloor {
        layer: usize,
        floor: usize,
        len: usize,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("budget {budget} cannot cover protected floors totalling {floors}")]
    InfeasibleBudget { floors: usize, budget: usize },

    #[error("{}: bad magic {found:?}, expected {expected:?}", path.display())]
    BadMagic {
        path: PathBuf,
        expected: [u8; 4],
        found: [u8; 4],
    },

    #[error("{}: unsupported format version {found}, expected {expected}", path.display())]
    Version {
        path: PathBuf,
        expected: u32,
        found: u32,
    },

    #[error("{}: truncated: expected {expected} bytes, found {actual}", path.display())]
    Truncated {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },

    #[error("{}: size mismatch: expected {expected} bytes, found {actual}", path.display())]
    SizeMismatch {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },

    #[error("{}: invalid {field} byte {value:#04x}", path.display())]
    InvalidByte {
        path: PathBuf,
        field: &'static str,
        value: u8,
    },

    #[error("plan does not match input: {0}")]
    PlanMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
