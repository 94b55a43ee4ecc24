//! Dense tensors, a recorded reverse-mode graph and a finite-difference
//! gradient checker.

mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use gradcheck::{grad_check, grad_check_many, relative_error, REL_FLOOR};
pub use graph::{BackwardCtx, BackwardFn, Gradients, Graph, Var};
pub use params::{round_f32, Binder, ParamStore};
pub use tensor::{log_softmax_rows, log_sum_exp, matmul, matmul_nt, matmul_tn, softmax_rows, Tensor};
