//! Multi-scale changepoint detection with pyramid recurrent networks.
//!
//! The pipeline: a trainable wavelet filter bank turns a multivariate series
//! into a pyramid of highpass responses at geometrically coarser resolutions;
//! a shared-weight CNN runs over every pyramid level; a hierarchically coupled
//! recurrent layer fuses the levels top-down; a sigmoid head emits per-step
//! change scores. Baselines (plain CNN, CNN+RNN, wavelet CNN with mean fusion)
//! share the same building blocks. Everything is built on a small f64
//! reverse-mode autodiff engine so gradients are exact and checkable.

pub mod adam;
pub mod checkpoint;
pub mod data;
pub mod dwn;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod prl;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod wavelet;

pub use error::{Error, Result};
pub use graph::{Graph, NodeId, Padding};
pub use tensor::Tensor;
