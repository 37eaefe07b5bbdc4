//! Interventional saliency for action-predicting policies.
//!
//! Occlude coarse image cells at random, swap them for a blurred copy, and
//! measure how far the policy's action moves. The resulting maps feed
//! region-level metrics such as the nuisance mass ratio, and the same metric
//! path scores attention and token-norm baselines.

pub mod baselines;
pub mod bench;
pub mod error;
pub mod interventions;
pub mod iss;
pub mod masks;
pub mod metrics;
pub mod policy;
pub mod rng;
pub mod scene;
pub mod tensor;

pub use error::{Error, Result};
