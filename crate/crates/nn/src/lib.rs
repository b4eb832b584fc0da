//! Numerical substrate: `f64` tensors, a reverse-mode autodiff tape, a tiny
//! decoder-only transformer, optimizers and checkpoints.

pub mod checkpoint;
pub mod error;
pub mod graph;
pub mod model;
pub mod optim;
pub mod tensor;

pub use error::{NnError, Result};
pub use graph::{Graph, Segment, Var};
pub use model::{LogitBatch, ModelConfig, PackedForward, TinyTransformerLM};
pub use optim::{OptimizerKind, OptimizerState};
pub use tensor::{ParamId, ParamStore, Tensor};
