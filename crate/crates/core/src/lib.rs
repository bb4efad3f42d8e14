//! Offline model-based reinforcement learning for sepsis-style treatment
//! policies: cohorts, rewards, learned dynamics, behavior cloning, policy
//! optimization and off-policy evaluation.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod behavior;
pub mod data;
pub mod dynamics;
pub mod error;
pub mod model_io;
pub mod nn;
pub mod ope;
pub mod policy;
pub mod policy_opt;
pub mod reward;
pub mod synth;

pub use error::{Error, Result};
