//! Dense grid arithmetic, reverse-mode differentiation, and the signal
//! primitives the rest of the pipeline builds on.

mod check;
mod graph;
mod signal;
mod tensor;

pub use check::finite_difference_check;
pub use graph::{linear2d, linear_vec, Gradients, Graph, Var};
pub use signal::{
    avg_pool_stride1, bilinear_resize, gaussian_field, gelu, gelu_scalar, layer_norm,
    softmax_over, LAYER_NORM_EPS,
};
pub use tensor::{matmul, matvec, transpose2d, Real, Tensor};
