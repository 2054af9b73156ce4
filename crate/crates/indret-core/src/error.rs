use alloc::string::String;
use core::fmt;

/// Error type shared by all core modules.
#[derive(Debug, Clone, PartialEq)]
pub enum CoreError {
    /// Tensor shapes or patch-vector lengths do not line up.
    Dimension(String),
    /// A configuration value violates its invariants.
    Config(String),
    /// A learnable parameter is out of its admissible range.
    Parameter(String),
    /// A caller-side contract was violated (e.g. non-scalar loss node).
    Contract(String),
    /// A referenced layer/node/id does not exist.
    Lookup(String),
    /// Model state is unusable for the requested operation.
    Model(String),
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::Dimension(m) => write!(f, "dimension error: {m}"),
            CoreError::Config(m) => write!(f, "configuration error: {m}"),
            CoreError::Parameter(m) => write!(f, "parameter error: {m}"),
            CoreError::Contract(m) => write!(f, "contract violation: {m}"),
            CoreError::Lookup(m) => write!(f, "lookup error: {m}"),
            CoreError::Model(m) => write!(f, "model error: {m}"),
        }
    }
}

impl core::error::Error for CoreError {}

pub type Result<T> = core::result::Result<T, CoreError>;
