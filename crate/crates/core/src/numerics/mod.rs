//! Dense `f64` tensors, a reverse-mode tape, AdamW and seeded randomness.

pub mod gradcheck;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use optim::{AdamW, OptimizerState, Schedule};
pub use params::{Bound, Param, ParamStore};
pub use tape::{Gradients, RowMix, Tape, Var};
pub use tensor::Tensor;
