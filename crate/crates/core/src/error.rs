//! Crate-wide error type.
//!
//! Variants are grouped by how the CLI maps them to exit codes: usage and
//! configuration problems, violated invariants/bounds, and numeric failures.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not conform (matrix products, model/input mismatches).
    #[error("shape error: {0}")]
    Shape(String),

    /// An argument is out of its documented range or a required input is missing.
    #[error("argument error: {0}")]
    Argument(String),

    /// A model or experiment configuration is invalid.
    #[error("config error: {0}")]
    Config(String),

    /// An iterative routine failed to converge or produced non-finite values.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// An operation was called in a state that forbids it (double fuse, stale tape).
    #[error("state error: {0}")]
    State(String),

    /// Data fails an integrity check (fingerprint mismatch, off-support delta).
    #[error("integrity error: {0}")]
    Integrity(String),

    /// A referenced entity (adapter id, weight id) is not registered.
    #[error("lookup error: {0}")]
    Lookup(String),

    /// A theorem precondition does not hold for the given instance.
    #[error("precondition error: {0}")]
    Precondition(String),

    /// An asserted bound or property check failed.
    #[error("bound failure: {0}")]
    Bound(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// A file has the wrong magic, version, or layout.
    #[error("format error: {0}")]
    Format(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Stable CLI exit code contract: 1 usage/config, 2 assertion/bound
    /// failure, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Shape(_)
            | Error::Argument(_)
            | Error::Config(_)
            | Error::Lookup(_)
            | Error::Io(_)
            | Error::Format(_)
            | Error::Json(_) => 1,
            Error::State(_) | Error::Integrity(_) | Error::Precondition(_) | Error::Bound(_) => 2,
            Error::Numeric(_) => 3,
        }
    }
}
