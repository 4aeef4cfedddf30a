//! Forward and backward kernels on plain tensors.
//!
//! Every kernel is a pure function of its inputs. [`crate::Graph`] and
//! [`crate::Eager`] both dispatch here, so recorded and unrecorded
//! evaluation produce bit-identical values.

mod conv;
mod elementwise;
mod norm;
mod spatial;

pub use conv::{conv2d_backward, conv2d_forward, conv_out_dim, Conv2dSpec};
pub use elementwise::{
    binary_backward, binary_forward, broadcast_shape, concat_channels, permute_channels,
    split_channels_grad, BinaryOp,
};
pub use norm::{batchnorm_backward, batchnorm_forward, BatchNormOutput, BnStats};
pub use spatial::{
    avgpool2, avgpool2_backward, crop2d, global_avg_pool, global_avg_pool_backward, maxpool2,
    maxpool2_backward, onehot_from_argmax, pad2d, pixel_shuffle, pixel_unshuffle,
    upsample_bilinear2, upsample_bilinear2_backward, upsample_nn2, upsample_nn2_backward,
    window_softmax, window_softmax_backward,
};
