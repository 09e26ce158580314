//! Dense `f64` tensors, a reverse-mode differentiation tape, and the Adam
//! optimizer.

mod error;
mod gradcheck;
mod kernels;
mod optim;
mod params;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{finite_diff_check, finite_diff_check_many};
pub use optim::{Adam, AdamState};
pub use params::{Bound, ParamId, ParamSet};
pub use tape::{BackwardReport, Tape, Var};
pub use tensor::Tensor;
