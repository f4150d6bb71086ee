//! Dense tensors, the autodiff tape, optimizers, seeded randomness and
//! `.tsr` serialization.

pub mod graph;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod tsr;

pub use graph::{Graph, Var};
pub use optim::{clip_grad_norm, Optimizer, OptimizerConfig, OptimizerKind, GRAD_CLIP_NORM};
pub use rng::Rng;
pub use tensor::Tensor;
