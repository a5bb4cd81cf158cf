//! Crate-wide error type.
//!
//! Variants map onto the CLI exit-code contract: config errors exit 2,
//! missing inputs exit 3, incompatibilities exit 4, anything else 1.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    /// Tensor shape violation; names both offending shapes.
    #[error("dimension error in {op}: left shape {left:?}, right shape {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    /// Invalid configuration value or malformed config file.
    #[error("configuration error: {0}")]
    Config(String),

    /// Invalid data encountered (labels out of range, corpus too small, ...).
    #[error("data error: {0}")]
    Data(String),

    /// Scene/example generation could not satisfy its constraints.
    #[error("generation error: {0}")]
    Generation(String),

    /// Training aborted (divergence, non-finite gradient, ...).
    #[error("training error: {0}")]
    Training(String),

    /// Non-finite activation detected during a forward pass.
    #[error("non-finite activation in transformer layer {layer}")]
    NonFiniteActivation { layer: usize },

    /// Checkpoint / corpus / task-head mismatch.
    #[error("incompatible inputs: {0}")]
    Incompatible(String),

    /// A required input file or directory does not exist.
    #[error("missing input: {0}")]
    MissingInput(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl CoreError {
    pub fn dimension(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        CoreError::Dimension {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
