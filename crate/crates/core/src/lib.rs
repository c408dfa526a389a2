//! Channel pruning and weight binarization for small keyword-spotting CNNs.
//!
//! Training runs in three stages:
//!
//! 1. channel pruning of the second convolution layer with a group penalty
//!    (relaxed group-wise splitting, group-sparse BinaryConnect, or a plain
//!    group-Lasso subgradient penalty);
//! 2. float retraining of the surviving channels under a frozen channel mask;
//! 3. 1-bit weight training (blended BinaryConnect) warm-started from stage 2.
//!
//! The building blocks are exposed separately: [`nn`] holds the layer
//! kernels, [`grouping`] and [`prox`] the penalties and their proximal maps,
//! [`optim`] the update rules and convergence diagnostics, [`model`] the
//! network, [`data`] the datasets, and [`pipeline`] the stage drivers,
//! checkpoints and reports.

pub mod data;
pub mod error;
pub mod model;
pub mod grouping;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod prox;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
