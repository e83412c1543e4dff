//! Reverse-mode automatic differentiation over dense `f64` tensors.

mod adam;
mod augment;
pub mod nn;
mod tape;
mod tensor;

pub use adam::Adam;
pub use augment::random_shift;
pub use nn::{join, orthogonal, Conv2d, Linear, Mlp, Module};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
