//! Differentiable primitive operations.
//!
//! Each primitive exposes a forward function and an exact backward that
//! maps the upstream gradient to gradients of every input. Backwards are
//! verified against central finite differences in the gradcheck suite.

mod activation;
mod conv3d;
pub mod gemm;
mod layernorm;
mod linear;
mod resample;
mod softmax;
mod tokens;

pub use activation::{gelu, gelu_backward, sigmoid, sigmoid_backward};
pub use conv3d::{
    conv3d, conv3d_backward, conv3d_out_dims, conv_transpose3d, conv_transpose3d_backward,
    conv_transpose3d_out_dims,
};
pub use layernorm::{layer_norm, layer_norm_backward, LayerNormCache, LN_EPS};
pub use linear::{linear, linear_backward, matmul};
pub use resample::{trilinear_resample, trilinear_resample_backward};
pub use softmax::{softmax, softmax_backward};
pub use tokens::{from_token_matrix, to_token_matrix};
