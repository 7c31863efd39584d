//! Stochastic-masking and Bayes-by-Backprop layers for small convolutional networks,
//! with Monte-Carlo predictive uncertainty metrics.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autograd;
pub mod bayes;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gradcheck;
mod kernels;
pub mod masking;
pub mod model;
pub mod optim;
pub mod params;
pub mod rng;
pub mod selftest;
pub mod tensor;
pub mod uncertainty;

pub use error::{Error, Result};
pub use kernels::BatchStats;
pub use tensor::Tensor;
