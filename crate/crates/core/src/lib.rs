//! Artifact discovery for text classifiers.
//!
//! The crate trains a small differentiable classifier, attributes its
//! predictions to input tokens (feature attribution), to training instances
//! (instance attribution) and to tokens inside training instances
//! (training-feature attribution), and verifies candidate artifacts by
//! masking and editing inputs. Model-free PMI and competency statistics are
//! provided as baselines.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod corpus;
pub mod error;
pub mod feature_attr;
pub mod instance_attr;
pub mod model;
pub mod pipeline;
pub mod report;
pub mod tfa;
pub mod verify;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
