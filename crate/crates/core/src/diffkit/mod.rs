//! Minimal reverse-mode differentiation over dense `f64` matrices, the layers
//! used by the reward and policy networks, Adam, and a finite-difference checker.

mod gradcheck;
mod layers;
mod optim;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use layers::{BiGruEncoder, GruParams, Linear};
pub use optim::{adam_step, AdamConfig, OptimState};
pub use params::{Gradients, Param, ParamStore};
pub use tape::{NodeId, Tape};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum DiffError {
    #[error("shape mismatch at op #{op_index} ({op}): expected {expected:?}, got {actual:?}")]
    ShapeMismatch { op_index: usize, op: &'static str, expected: (usize, usize), actual: (usize, usize) },
    #[error("backward called before the output was recorded")]
    BackwardBeforeForward,
    #[error("non-finite value in parameter `{param}`")]
    NonFinite { param: String },
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("duplicate parameter `{0}`")]
    DuplicateParam(String),
    #[error("parameter `{id}` has shape {shape:?} but {len} values")]
    BadParamShape { id: String, shape: Vec<usize>, len: usize },
    #[error("gradient layout does not match parameters ({params} vs {grads})")]
    GradientLayout { params: usize, grads: usize },
    #[error("token id {id} outside vocabulary of size {vocab}")]
    OutOfVocabulary { id: u32, vocab: usize },
    #[error("cannot encode an empty sequence")]
    EmptySequence,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
