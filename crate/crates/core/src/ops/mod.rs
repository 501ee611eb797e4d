//! Reference kernels with exact backward passes.

mod activation;
mod batchnorm;
mod conv;
mod meter;

pub use activation::{relu, relu_grad, relu_metered, sigmoid};
pub use batchnorm::{
    batchnorm, batchnorm_eval_grad, batchnorm_grad, batchnorm_metered, BNParams, BatchStats,
    DEFAULT_BN_EPS, DEFAULT_BN_MOMENTUM,
};
pub use conv::{conv2d, conv2d_grad, conv2d_metered, ConvGrads, ConvSpec};
pub use meter::{FlopCounter, Meter, NoMeter};
