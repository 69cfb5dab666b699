//! Minimal reverse-mode differentiation engine plus a finite-difference checker.

mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_report, GradCheckReport};
pub use params::{Bound, ParamStore};
pub use tape::{dropout_mask, Adjacency, Gradients, Tape, Var, EPS};
pub use tensor::Tensor;

pub(crate) use tape::cosine;
