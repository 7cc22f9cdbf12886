//! Differentiable layer primitives with explicit backward passes.

mod conv;
mod norm;
mod ops;
mod pool;

pub use conv::{conv2d, conv2d_backward, ConvGrads, ConvSpec};
pub use norm::{batch_norm, batch_norm_backward, BnCache, BnGrads, BnMode, BnOutput, BN_EPS, BN_MOMENTUM};
pub use ops::{
    concat, dropout, dropout_backward, dropout_mask, matmul, relu, relu_backward, softmax,
    softmax_backward, split_channels, DropoutMode,
};
pub use pool::{avg_pool2d, avg_pool2d_backward, pool_output_size};
