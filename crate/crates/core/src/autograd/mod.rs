//! Reverse-mode automatic differentiation over dense f64 tensors.
//!
//! Every model and loss in the crate is written against [`Tape`] and [`Var`],
//! so one finite-difference harness ([`grad_check`], [`grad_check_params`])
//! validates all of them.

mod gradcheck;
mod optim;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{
    grad_check, grad_check_params, relative_error, GradCheckEntry, GradCheckReport, REL_ERROR_FLOOR,
};
pub use optim::{Adam, Sgd};
pub use params::{ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
