//! Constrained Kullback-Leibler barycentres of expert diffusion models.
//!
//! A set of experts each propose a drift for a diffusion with a shared
//! volatility. The combined model is the measure closest (in weighted KL) to
//! all experts subject to expectation constraints on the terminal state and on
//! running costs. The crate simulates the experts, solves for the Lagrange
//! multipliers of the constraints by importance sampling, and learns the
//! optimal drift either by matching Radon-Nikodym derivatives or by regressing
//! the value function. A one-dimensional finite-difference solver provides a
//! ground truth.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod constraints;
pub mod drift_learner;
pub mod error;
pub mod experiments;
pub mod girsanov;
pub mod ivsmile;
pub mod lagrange;
pub mod linalg;
pub mod mlp;
pub mod pde;
pub mod rng;
pub mod sde;
pub mod stats;
pub mod value_learner;

pub use error::{Error, Result};
