use thiserror::Error;

/// Errors shared across the library.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied value violates a precondition (counts, tolerances, sizes).
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// Image or mask geometry does not fit (odd dimensions, mask larger than image).
    #[error("geometry error: {0}")]
    Geometry(String),

    /// Vector or matrix dimensions disagree.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Non-finite or otherwise out-of-domain input value.
    #[error("domain error: {0}")]
    Domain(String),

    /// Degenerate data (singular covariance, collapsed sample).
    #[error("degenerate data: {0}")]
    Degenerate(String),

    /// Numerical failure during optimization; `block` names the offending parameter block.
    #[error("numerical failure in {block}: {detail}")]
    Numerical { block: String, detail: String },
}

pub type Result<T> = std::result::Result<T, Error>;
