//! Tensor substrate: dense tensors, reverse-mode differentiation with
//! explicit per-op backward rules, Adam, finite differences and the binary
//! tensor format.

pub mod autodiff;
pub mod gradcheck;
pub mod io;
pub(crate) mod kernels;
pub mod ops;
pub mod optim;
pub mod param;
pub mod rng;
pub mod tensor;

pub use autodiff::{CustomOp, Gradients, Tape, Var};
pub use gradcheck::{finite_diff_grad, finite_diff_partial, relative_error};
pub use io::{AnyTensor, TensorFile};
pub use kernels::UpGrid;
pub use optim::{Adam, AdamConfig};
pub use param::{Init, ParamId, ParamStore, Parameter};
pub use rng::{streams, RngState};
pub use tensor::{DType, Real, Tensor};
