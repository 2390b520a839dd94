//! Crate-wide error type.
//!
//! Variants follow the failure taxonomy used throughout the crate: bad
//! configuration, bad caller input, malformed files, inconsistent data,
//! out-of-range arguments, broken invariants, and numeric faults. The CLI
//! maps `Config`/`Input` to exit code 1 (usage) and everything else to exit
//! code 2 (runtime fault).

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A configuration value is invalid or missing.
    #[error("config error: {0}")]
    Config(String),

    /// A caller-supplied argument is invalid for the operation.
    #[error("input error: {0}")]
    Input(String),

    /// A file failed to parse; `line` is 1-based.
    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    /// Records contradict each other (duplicates, mismatched shapes).
    #[error("data integrity error: {0}")]
    DataIntegrity(String),

    /// An index or step is outside its documented domain.
    #[error("range error: {0}")]
    Range(String),

    /// An internal invariant did not hold.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A NaN or infinity reached a place that must stay finite.
    #[error("numeric fault: {0}")]
    NonFinite(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
