//! Fair binary classification when demographic attributes are known for only
//! a small subset of training data.
//!
//! The crate provides:
//! - tabular loading/encoding with label-stratified splits and joint-stratified
//!   demographic masking ([`dataset`]),
//! - a small reverse-mode autodiff tape able to differentiate through a short
//!   unrolled inner optimization ([`autodiff`]),
//! - logistic model plumbing and optimizers ([`model`]),
//! - group bias metrics and differentiable relaxations ([`fairness`]),
//! - trainers: unconstrained, reweighing, a group-regularized learner, an
//!   adversarially reweighted learner, imputation pipelines, and the bilevel
//!   instance-reweighting trainer ([`trainers`]),
//! - an experiment harness with resumable suites and acceptance-tagged
//!   summary checks ([`harness`]).

pub mod autodiff;
pub mod dataset;
pub mod error;
pub mod fairness;
pub mod harness;
pub mod model;
pub mod trainers;

pub use error::{Error, Result};
