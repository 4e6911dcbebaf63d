//! Cost-aware optimistic exploration for constrained reinforcement learning.
//!
//! The exploration policy shifts the target Gaussian mean along a direction
//! that is projected, in the policy's covariance metric, away from cost
//! increase, with a step length bounded by a KL trust region and by the
//! remaining cost budget.

pub mod approximator;
pub mod envs;
pub mod error;
pub mod harness;
pub mod learner;
pub mod quantile_critics;
pub mod sigma_geometry;
pub mod step_control;

pub use error::{CoxqError, Result};
