//! Learnable QP safety filters.
//!
//! A safety filter sits between a reference controller and a plant and
//! minimally modifies the proposed input so that state and input
//! constraints keep holding. This crate provides:
//!
//! - [`qp`]: standard-form QPs, the predictive-filter QP, a PDHG solver and an
//!   active-set reference solver;
//! - [`filters`]: passthrough, the nominal predictive filter, the learnable QP
//!   filter with exact reverse-mode gradients, and an MLP baseline;
//! - [`envs`]: benchmark plants, reference controllers and rollouts;
//! - [`rl`]: PPO training;
//! - [`certify`]: one-step persistent-safety falsification and SDP export;
//! - [`harness`]: evaluation, FLOP accounting and table output.

pub mod certify;
pub mod envs;
pub mod error;
pub mod filters;
pub mod harness;
pub mod linalg;
pub mod model;
pub mod polytope;
pub mod qp;
pub mod rl;

pub use error::{Error, Result};
pub use filters::{FilterConfig, LqpParams, SafetyFilter};
pub use model::{BenchmarkSystem, Bound, LtiModel, SafeSet, SafetySpec};
pub use qp::QpProblem;
