//! Differentiable kernels every higher-level block composes.

pub mod batchnorm;
pub mod conv;
pub mod matmul;
pub mod pointwise;
pub mod resize;

pub use batchnorm::{batchnorm2d, batchnorm2d_backward, BnCache, BnUpdate};
pub use conv::{
    conv2d, conv2d_backward, conv_out_len, depthwise_conv2d, depthwise_conv2d_backward, transpose_conv2d,
    transpose_conv2d_backward,
};
pub use matmul::{matmul, matmul_at, matmul_at_into, matmul_bt, matmul_bt_into, matmul_into};
pub use pointwise::{
    concat_channels, concat_channels_backward, relu, relu_backward, sigmoid, sigmoid_backward, sigmoid_scalar,
    softmax_lastdim, softmax_row, softmax_row_backward,
};
pub use resize::{bilinear_upsample, bilinear_upsample_backward};
