//! Crate-wide error type.

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// All failure modes surfaced by the library.
///
/// The CLI maps these onto process exit codes, so the split between variants
/// is behavioural: bad inputs ([`Error::Parameter`], [`Error::Schema`], ...),
/// problems that make an instance unsolvable ([`Error::Infeasible`]), and I/O.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller-supplied value is outside its documented domain.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// A scenario or configuration file does not match the expected schema.
    /// `field` names the offending key (dotted path into the document).
    #[error("schema error at `{field}`: {message}")]
    Schema { field: String, message: String },

    /// The instance admits no solution under the given constraints
    /// (e.g. no service radius reaches the SNR threshold).
    #[error("infeasible: {0}")]
    Infeasible(String),

    /// Tensor shapes do not line up; both shapes are named in the message.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// An API contract was violated (e.g. backward on a non-scalar).
    #[error("contract violation: {0}")]
    Contract(String),

    /// An index is out of range for the structure it addresses.
    #[error("index out of range: {0}")]
    Index(String),

    /// A numeric invariant failed at runtime (NaN/Inf in a computation).
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// A checkpoint file is malformed (bad magic, truncation, CRC mismatch).
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    /// Underlying file-system failure.
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Shorthand for [`Error::Parameter`].
    pub fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    /// Shorthand for [`Error::Contract`].
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
