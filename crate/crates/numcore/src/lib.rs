//! Minimal dense-tensor kernel: a recorded tape with reverse-mode
//! gradients, the handful of primitives needed by small recurrent and
//! convolutional networks, Adam, and a binary checkpoint format.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod nn;
pub mod param;
pub mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use param::{AdamConfig, ParamStore};
pub use tensor::Tensor;

/// Logistic function, evaluated without overflow for large `|x|`.
pub fn sigmoid(x: f64) -> f64 {
    graph::sigmoid(x)
}

#[derive(Debug, thiserror::Error)]
pub enum NumError {
    #[error("shape error in {op}{}: {detail}", node.map(|n| format!(" (node {n})")).unwrap_or_default())]
    Shape { op: &'static str, node: Option<usize>, detail: String },
    #[error("non-finite value in {what}")]
    NonFinite { what: String },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("unknown parameter {0}")]
    MissingParam(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
