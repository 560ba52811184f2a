//! Recovery tooling for leaked classifiers.
//!
//! A deployed model that leaks hands an attacker white-box access. This crate
//! trains replacement versions that agree with the leaked ones on benign data
//! but differ elsewhere, and filters queries whose loss on the new version is
//! much higher than on some leaked version. It also ships the attacks used to
//! evaluate that filter, a breach simulation harness, an analytic check of
//! the loss-gap bound for linear models, and a small inference gateway.

// `!(x > 0.0)` is how NaN gets rejected in the validators.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attacks;
pub mod distributions;
pub mod error;
pub mod experiment;
pub mod filter;
pub mod gateway;
pub mod nnet;
pub mod seed;
pub mod theory;
pub mod versioning;

pub use error::{Error, Result};
pub use nnet::{LossKind, MlpModel, Sample, TrainConfig};
