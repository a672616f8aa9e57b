//! Propagation regularization (P-reg) for graph neural networks.
//!
//! P-reg penalizes the disagreement `φ(Z, ÂZ)` between a model's node outputs
//! `Z` and their one-step neighbor average `ÂZ`. This crate provides the
//! pieces to train and study it end to end, with no external numeric backend:
//!
//! - [`graph`]: CSR graphs, normalized adjacency and Laplacian operators
//! - [`matrix`]: dense row-major matrices
//! - [`nn`]: two-layer GCN / MLP with manual backward passes and a gradient checker
//! - [`reg`]: P-reg (squared error, cross entropy, KL) and baseline regularizers
//! - [`train`]: composite loss, Adam, early stopping, splits, μ grid search
//! - [`analysis`]: numerical checks of the smoothing theory and the ω metric
//! - [`data`]: dataset files and a stochastic-block-model generator

pub mod analysis;
pub mod data;
pub mod error;
pub mod graph;
pub mod matrix;
pub mod nn;
pub mod reg;
pub mod train;

pub use error::{Error, Result};
pub use matrix::DenseMatrix;
