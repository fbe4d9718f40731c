//! Dense tensors, reverse-mode differentiation and gradient checking.

mod gradcheck;
mod graph;
mod mlp;
mod param;
mod tensor;

pub use gradcheck::{grad_check, grad_check_params};
pub use graph::{Gradients, Graph, Var};
pub use mlp::{mlp_apply, MlpParams};
#[doc(hidden)]
pub use param::join_name;
pub use param::{LayerNorm, Linear, Param, ParamId, Parameterized, LAYER_NORM_EPS};
pub use tensor::{Real, Tensor};
