//! Dense arrays, a reverse-mode autodiff tape, and the Adam updater.

mod adam;
mod array;
mod params;
mod tape;

pub use adam::{clip_grad_norm, AdamConfig, AdamState};
pub use array::Tensor;
pub use params::{ParamId, ParamStore};
pub use tape::{log_sum_exp, sigmoid, softplus, Gradients, Tape, Var};
