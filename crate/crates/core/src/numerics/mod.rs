//! Tensors, reverse-mode differentiation, optimisation and the binary
//! tensor container.

pub mod io;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use optim::{LrSchedule, OptimizerState};
pub use tape::{ConvGeom, Gradients, Tape, Var};
pub use tensor::{cosine_sim, l2_normalize, matmul, Tensor};
