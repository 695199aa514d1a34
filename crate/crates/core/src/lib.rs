//! A from-scratch CPU deep-learning micro-framework built around
//! stochastic two-branch residual blending: per-image blending
//! coefficients are redrawn before every forward pass and replaced by
//! independently chosen coefficients before every backward pass, turning
//! branch summation into a regularizer.
//!
//! The crate provides:
//!
//! - [`graph`]: a define-by-run reverse-mode autodiff tape with the small
//!   op set the architectures need (conv2d, batchnorm, relu, average
//!   pooling, pixel shift, channel concat, linear, softmax cross-entropy)
//!   plus the coefficient-blended combine node;
//! - [`shake`]: coefficient sampling — forward/backward modes, batch vs
//!   per-image granularity, restricted intervals, and the β-update rule
//!   family;
//! - [`models`]: builders for the two-branch residual network and its
//!   skipless/BN-free variants, with parameter counting;
//! - [`data`]: CIFAR-10 binary ingestion, pad-crop-flip augmentation, and
//!   a deterministic synthetic dataset;
//! - [`train`]: SGD with momentum and selective weight decay, cosine
//!   annealing without restart, warm starts, divergence detection;
//! - [`checkpoint`]: versioned binary snapshots that resume training
//!   bit-exactly, including the coefficient stream position;
//! - [`analysis`]: streaming branch-correlation and layer-alignment
//!   statistics;
//! - [`gradcheck`]: finite-difference verification for the
//!   true-gradient configurations.
//!
//! Everything is seed-deterministic: reruns with the same configuration
//! and seed reproduce coefficient draws, data order, and results bitwise
//! (see [`rng`] for the draw-order contract).

pub mod analysis;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
mod kernels;
pub mod models;
pub mod params;
pub mod rng;
pub mod shake;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, NodeId, Reduction};
pub use models::{Family, ModelSpec, Network};
pub use params::{ParamId, ParamSet};
pub use rng::RngStream;
pub use shake::{
    BackwardMode, CoefficientPass, CoefficientSet, ForwardMode, Level, Phase, ShakeConfig,
};
pub use tensor::{Dtype, Element, Tensor};
pub use train::{EpochRecord, Precision, TrainConfig, TrainState};
