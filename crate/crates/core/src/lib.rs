//! Adaptation toolkit for multivariate (graph) time-series forecasting.
//!
//! The crate wraps a pretrained, node-shared forecasting backbone with
//! node-adaptive low-rank layers: small per-node correction factors organized
//! into residual predictor stacks, blended with the frozen backbone through a
//! learned sigmoid gate. Everything runs on a self-contained `f64` tape
//! autodiff engine; datasets, checkpoints and reports use small, stable file
//! formats so runs are reproducible byte for byte.
//!
//! Module map:
//! - [`tensor`]: tensors, the autodiff tape, gradient checking
//! - [`nn`]: affine / convolution / normalization / dropout building blocks
//! - [`nall`]: node-adaptive low-rank layers
//! - [`nsp`]: residual stacks of low-rank layers with a conv stem and a
//!   forecasting head
//! - [`backbone`]: the node-shared models that get adapted
//! - [`fusion`]: the gated blend of backbone and stacks, and the training loss
//! - [`data`]: synthetic generation, dataset files, splits, normalization,
//!   windowing
//! - [`train`]: optimizer, schedule, training/evaluation loops, metrics,
//!   checkpoints
//! - [`gradcheck`]: end-to-end gradient verification of every layer kind
//! - [`exec`]: the data-parallel/sequential execution switch

pub mod backbone;
pub mod data;
pub mod error;
pub mod exec;
pub mod fusion;
pub mod gradcheck;
pub mod model;
pub mod nall;
pub mod nn;
pub mod nsp;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
