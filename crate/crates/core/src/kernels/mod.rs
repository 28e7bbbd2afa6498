//! Forward/backward kernels on plain tensors. The tape in
//! [`crate::tape`] records these; they can also be called directly.

pub mod conv;
pub mod dense;
pub mod norm;
pub mod pool;

pub use conv::{conv2d_backward, conv2d_forward, ConvGeometry, ConvParams};
pub use dense::{
    linear_backward, linear_forward, softmax, softmax_cross_entropy_backward,
    softmax_cross_entropy_forward,
};
pub use norm::{batchnorm2d_backward, batchnorm2d_forward, BatchNormState, BnMode, Mode};
pub use pool::{
    avgpool2d_backward, avgpool2d_forward, global_avg_pool_backward, global_avg_pool_forward,
};
