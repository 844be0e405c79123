//! Layer kernels with hand-derived backward passes.

pub mod act;
pub mod conv;
pub mod dense;
pub mod resample;
pub mod upsample;

pub use act::{sigmoid, softplus, Activation};
pub use conv::{conv2d_backward, conv2d_backward_select, conv2d_forward, ConvGeom, ConvGrads, ConvWant};
pub use dense::{global_avg_pool, global_avg_pool_backward, linear_backward, linear_forward};
pub use resample::Resampler;
pub use upsample::{upsample_nearest, upsample_nearest_backward};
