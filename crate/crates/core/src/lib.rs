//! Hybrid model/data-parallel training of layer DAGs over a message-passing
//! transport.

pub mod comm;
pub mod data;
pub mod metrics;
pub mod model_graph;
pub mod partitioner;
pub mod run;
pub mod tensor;
pub mod testing;
pub mod trainer;

pub use model_graph::{build_model_from_spec, GradientSet, LayerId, ModelGraph, ModelSpec};
pub use tensor::Tensor;
pub use trainer::{fit, fit_rank, fit_sequential, Strategy, TrainConfig};
