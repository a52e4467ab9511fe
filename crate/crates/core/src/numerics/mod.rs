//! Minimal tensor engine with reverse-mode differentiation.

pub mod gradcheck;
pub(crate) mod kernels;
pub mod tape;
pub mod tensor;

pub use gradcheck::{gradient_check, gradient_check_at, DEFAULT_STEP};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
