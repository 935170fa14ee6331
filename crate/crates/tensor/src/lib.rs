//! Dense row-major matrices with a dynamic reverse-mode tape.
//!
//! Every value is a 2-D matrix of `f64`; scalars are `1 x 1` and vectors are
//! single rows. A [`Tape`] is built fresh for each forward pass, records the
//! operations applied to [`Var`] handles, and is consumed by
//! [`Tape::backward`]. Learned weights live in a [`ParamStore`] and enter a
//! tape through [`Tape::param`]; the same parameter id used twice on one tape
//! resolves to the same node, which is how weight sharing works.

pub mod check;
mod error;
pub mod init;
mod optim;
mod params;
mod tape;
mod tensor;

pub use error::TensorError;
pub use optim::{Method, Optimizer};
pub use params::{Param, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
