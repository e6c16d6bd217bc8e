//! Dense tensors, parameters and a tape-based reverse-mode differentiator.

mod gradcheck;
mod param;
mod tape;
mod tensor;

pub use gradcheck::grad_check;
pub use param::{glorot_uniform, ParamId, ParamStore, Parameter};
pub use tape::{Activation, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::softplus;
