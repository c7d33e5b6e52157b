//! Tensor operations with reverse-mode differentiation.

mod gradcheck;
pub(crate) mod kernels;
mod params;
mod tape;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use params::{ParamId, ParamStore, Parameter};
pub use tape::{BnMode, Gradients, SpikeForward, Tape, Var, BN_EPS};
