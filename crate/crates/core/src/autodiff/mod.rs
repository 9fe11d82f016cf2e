//! Dense rank-4 tensors with reverse-mode differentiation.
//!
//! Every forward op records itself on the graph of its output when any input
//! is tracked; [`Tensor::backward`] walks that graph once and deposits
//! gradients on trainable leaves.

mod buffer;
mod gradcheck;
pub mod kernels;
mod ops;
mod tensor;

pub use buffer::{stack_batch, Buffer, Element, Labels, Shape};
pub use gradcheck::{grad_check, grad_check_at, relative_error, GradCheckReport};
pub use ops::{
    abs, add, bilinear_upsample, ce_per_pixel, concat_channels, conv2d, crop, maxpool2, mul, relu,
    scale, slice_channels, softmax_channels, sum, weighted_sum, ConvKernel,
};
pub use tensor::Tensor;
