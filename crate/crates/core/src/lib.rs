//! Driving-style adaptation for a learned motion planner: imitation
//! pre-training, then fine-tuning toward one user from a few demonstrations.
//!
//! A compact multi-modal driving policy is pre-trained by imitation on a
//! large expert corpus, then fine-tuned toward one user's driving style on
//! mixed expert/user batches, with a feature-expectation matching term
//! derived from maximum-entropy inverse reinforcement learning. A
//! differentiable Gauss-Newton trajectory optimizer can sit behind the
//! network and be trained end to end.

pub mod cli;
pub mod costs;
pub mod error;
pub mod eval;
pub mod features;
pub mod irl;
pub mod kinematics;
pub mod optimizer;
pub mod policy;
pub mod pretrain;
pub mod scalar;
pub mod scenarios;
pub mod train;
pub mod transfer;

pub use error::{Error, Result};
