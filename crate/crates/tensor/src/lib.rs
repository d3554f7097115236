//! Dense tensors with tape-based reverse-mode autodiff and the convolution
//! kernels used by the detection network.

pub mod conv;
mod error;
pub mod flops;
pub mod gradcheck;
mod ops;
mod real;
mod tape;
mod tensor;

pub use conv::{
    batch_norm, bilinear_resize, bilinear_upsample2, central_difference_conv2d, channel_max,
    channel_mean, conv2d, max_pool2, mul_channel_broadcast, BatchStats, ConvGeometry, RunningStats,
};
pub use error::{Result, TensorError};
pub use gradcheck::{fd_gradient, fd_partial, relative_error};
pub use real::Real;
pub use tape::{BackwardFn, Gradients, Tape, Var};
pub use tensor::Tensor;
