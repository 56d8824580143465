//! Mirror-descent guided policy search.
//!
//! The algorithm alternates a control phase (per-condition KL-constrained
//! trajectory optimization against the linearized global policy, solved by
//! maximum-entropy LQR with a bracketing dual search) with a supervised
//! phase (projection of the local controllers onto a conditionally
//! Gaussian global policy), with step-size rules and cost-bound
//! diagnostics driven by analytic expected costs under the fitted
//! linear-Gaussian models.
//!
//! Module map:
//! - [`trajdist`]: Gaussian trajectory-distribution algebra (KL, marginal
//!   propagation, expected cost, entropy).
//! - [`fitting`]: linear-Gaussian dynamics and policy-linearization fits
//!   via linear regression with a Gaussian-mixture prior.
//! - [`lqr`]: maximum-entropy LQR backward pass and the KL-constrained
//!   control step with its dual search.
//! - [`policy`]: the global policy, the supervised projection loss and its
//!   optimizer, and checkpoint persistence.
//! - [`mdgps`]: the outer loop, step-size adaptation, and bound
//!   diagnostics.
//! - [`envs`]: desk-scale simulated control tasks with analytic cost
//!   expansions.
//! - [`harness`]: experiment configuration, CLI commands, structured run
//!   logs.

pub mod envs;
pub mod error;
pub mod fitting;
pub mod harness;
pub mod lqr;
pub mod mdgps;
pub mod policy;
pub mod rng;
pub mod test_util;
pub mod trajdist;

pub use error::{MdgpsError, Result};
