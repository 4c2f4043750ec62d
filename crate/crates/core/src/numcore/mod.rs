//! Dense 64-bit tensors and a reverse-mode tape with finite-difference checks.

mod checkpoint;
mod functional;
mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_SCHEMA};
pub use functional::{cross_entropy, log_sum_exp, softmax};
pub use gradcheck::{grad_check, grad_check_against};
pub use params::{ParamId, ParamStore, Parameter};
pub use tape::{argmax, Gradients, Mask, Tape, Var};
pub use tensor::Tensor;
