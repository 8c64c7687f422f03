//! Dense `f64` kernels with reverse-mode gradients.

mod graph;
mod gradcheck;
mod optim;
mod tensor;

pub use gradcheck::finite_diff_check;
pub use graph::{primitive_forward, Graph, Primitive, Var, LOG_EPS};
pub use optim::{sgd_step, Optimizer, OptimizerKind, Param};
pub use tensor::Tensor;

pub(crate) use tensor::gemm as tensor_gemm;
