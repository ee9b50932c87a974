//! Dense `f64` tensors, tape-based reverse-mode differentiation, parameter
//! containers, Adam/StepLR and a seeded generator.

pub mod gradcheck;
pub mod nn;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use nn::Mode;
pub use optim::{steplr, Adam, AdamConfig};
pub use params::{Bound, BufferSet, ParameterSet};
pub use rng::Rng;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
