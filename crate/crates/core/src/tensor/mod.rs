//! Dense `f64` tensors with a dynamic reverse-mode tape.

pub mod gradcheck;
mod kernels;
mod tape;
mod value;

pub use tape::{Tape, Var};
pub use value::Tensor;
