//! Error type shared by the whole engine.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by simulation, fitting, pricing, and the exact oracles.
#[derive(Debug, Error)]
pub enum Error {
    /// A model, payoff, space, or config violates one of its invariants.
    /// The message names the violated invariant.
    #[error("validation error: {0}")]
    Validation(String),

    /// An argument is outside the documented domain of an operation.
    #[error("argument error: {0}")]
    Argument(String),

    /// Input data is unusable (non-finite targets, length mismatches).
    #[error("data error: {0}")]
    Data(String),

    /// An operation was asked of a model variant that does not support it.
    #[error("unsupported: {0}")]
    Unsupported(String),

    /// A problem instance exceeds an exact-computation capacity limit.
    #[error("capacity exceeded: {0}")]
    Capacity(String),

    /// An operation was called before its prerequisites were established.
    #[error("state error: {0}")]
    State(String),

    /// The fitting batch was reused for evaluation; out-of-sample pricing
    /// requires an independent batch.
    #[error("batch reuse: {0}")]
    BatchReuse(String),

    /// A lookup key (state, table entry) was not found.
    #[error("lookup error: {0}")]
    Lookup(String),

    /// File or stream I/O failed.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// A serialized artifact could not be parsed.
    #[error("format error: {0}")]
    Format(String),
}
