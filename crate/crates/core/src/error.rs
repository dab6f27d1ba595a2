//! Crate-wide error type.
//!
//! Variants are grouped by what the caller can do about them: `Shape` and
//! `Contract` indicate a programming error at an API boundary, `Input` and
//! `Config` indicate bad user-supplied data, `Integrity`/`Version` indicate a
//! damaged or incompatible artifact on disk, and `Training`/`Sampling` report
//! failures of the optimization process itself.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents do not satisfy an operation's requirements.
    #[error("shape error: {0}")]
    Shape(String),

    /// An API precondition other than a shape constraint was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    /// User-supplied data (files, directories, CLI values) is unusable.
    #[error("input error: {0}")]
    Input(String),

    /// A configuration document is malformed or inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// A stored artifact failed checksum or format validation.
    #[error("integrity error: {0}")]
    Integrity(String),

    /// A stored artifact uses an unsupported container version.
    #[error("unsupported container version {found} (this build reads version {supported})")]
    Version { found: u16, supported: u16 },

    /// The optimization process failed (diverged, produced non-finite values).
    #[error("training error: {0}")]
    Training(String),

    /// Patch sampling could not satisfy its acceptance rule within budget.
    #[error("sampling error: {0}")]
    Sampling(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code used by the CLI: input/config problems, damaged
    /// artifacts and training failures are distinguishable by code.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Input(_) | Error::Config(_) | Error::Shape(_) | Error::Contract(_) => 2,
            Error::Integrity(_) | Error::Version { .. } => 3,
            Error::Training(_) | Error::Sampling(_) => 4,
            Error::Io(_) => 5,
        }
    }
}
