//! Differentiable kernels: every operation exposes a forward map and an
//! adjoint that together satisfy the finite-difference gradient checks in
//! the test suite.

pub mod activation;
pub mod batch_norm;
pub mod concat;
pub mod conv;
pub mod pool;
pub mod resize;

pub use activation::{relu, relu_backward, softmax_over_channels, softmax_backward};
pub use batch_norm::{batch_norm_infer, batch_norm_train, batch_norm_backward, BatchNormCache, BatchNormState};
pub use concat::{concat_channels, split_channels};
pub use conv::{convolve, convolve_backward, transposed_convolve, transposed_convolve_backward, ConvWeights, Padding};
pub use pool::{max_pool, max_pool_backward};
pub use resize::{center_crop, center_crop_backward, trilinear_resize, trilinear_resize_backward};
