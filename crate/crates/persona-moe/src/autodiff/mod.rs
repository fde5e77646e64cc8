//! Tape-based reverse-mode autodiff, generic over `f32`/`f64`.

pub mod check;
pub mod tape;
pub mod tensor;

pub use check::{finite_difference_check, GradCheck};
pub use tape::{Reduction, Tape, Var};
pub use tensor::{Real, Tensor};
