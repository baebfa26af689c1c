//! Dense tensors and the numeric primitives the detector is built from.

mod conv;
mod gradcheck;
mod interp;
mod loss;
mod ops;
mod tensor;

pub(crate) use conv::conv2d_plane;
pub use conv::{conv2d, transposed_conv2d, Conv2dParams};
pub use gradcheck::{finite_diff_gradcheck, relative_error, GradCheckReport};
pub use interp::{trilinear_interpolate, trilinear_into, DenseField, GridGeometry, InterpStats, Interpolated, SparseField, VoxelField};
pub use loss::{
    binary_cross_entropy, clamp_prob, focal_loss, l2_distance, l2_norm, l2_norm_sq, smooth_l1, smooth_l1_grad,
    softmax_cross_entropy, NormKind, PROB_EPS,
};
pub use ops::{batchnorm_inference, linear, log_sum_exp, relu, relu_inplace, sigmoid, softmax, BatchNorm, Dense};
pub use tensor::Tensor;
