//! Structural channel pruning: dependency grouping, importance criteria,
//! sparsity regularizers, FLOPs-targeted iterative pruning and a benchmark
//! harness, on a small CPU executor.

pub mod bench;
pub mod error;
pub mod exec;
pub mod flops;
pub mod group;
pub mod importance;
pub mod model;
pub mod sched;
pub mod sparse;
pub mod tensor;
pub mod zoo;

pub use error::{Error, Result};
pub use model::{load_model, save_model, LayerKind, LayerNode, ModelGraph, ParamRole};
pub use tensor::Tensor;
