//! Discrete-time diffusion models at desk scale.
//!
//! The crate covers noise schedules, the forward and reverse processes,
//! noise- versus data-prediction parameterizations, DDIM stepping and
//! progressive distillation of an N-step teacher into an N/2-step student,
//! plus the training loops, sample-quality metrics and synthetic datasets
//! used to exercise them.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod checks;
pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod distill;
pub mod error;
pub mod experiment;
pub mod losses;
pub mod metrics;
pub mod rng;
pub mod schedule;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
