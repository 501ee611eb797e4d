//! Efficient CNN building blocks and the tooling to check them.
//!
//! - [`ops`]: reference convolution, batch normalization and ReLU kernels with
//!   exact backward passes and operation metering.
//! - [`blocks`]: partial convolution, pointwise convolution and the FasterNet
//!   inverted-residual block.
//! - [`nam`]: normalization-based channel and spatial attention.
//! - [`gradcheck`]: central finite-difference gradient verification.
//! - [`complexity`]: static parameter and FLOP counting over model graphs.
//! - [`metrics`]: IoU matching, precision/recall, AP and mAP.
//! - [`graph`], [`model`], [`train`]: the model description language, its
//!   executable form and a small demonstration training loop.

// Index loops mirror the tensor math and read better than iterator chains here.
#![allow(clippy::needless_range_loop)]

pub mod blocks;
pub mod complexity;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod init;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod nam;
pub mod ops;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Shape, Tensor4};
