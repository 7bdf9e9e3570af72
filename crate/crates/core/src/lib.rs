//! Abstraction-based synthesis of composable neural-network controllers.
//!
//! The pipeline abstracts an uncertain discrete-time nonlinear system into a
//! finite MDP whose states are grid cells of the state space and whose actions
//! are boxes of affine-feedback parameters. One small ReLU policy is trained
//! per MDP transition and its weights are projected so that every affine piece
//! it realizes over its cell stays inside the transition's parameter box. At
//! runtime an arbitrary reach-avoid task is solved on the finite MDP (safety
//! backtracking + finite-horizon dynamic programming) and the stored policies
//! are composed through a time-varying activation map.
//!
//! Modules follow the pipeline order:
//!
//! - [`geom`]: axis-aligned boxes and interval arithmetic
//! - [`dynamics`]: nominal models, ground-truth model error, trajectories
//! - [`gp`]: Gaussian-process regression of the model error from residuals
//! - [`partition`]: state-space and controller-space grids
//! - [`mdp`]: reachable-set over-approximation and the finite MDP kernel
//! - [`relu`]: shallow ReLU policies, exact piecewise-affine form, weight projection
//! - [`ppo`]: per-transition policy-gradient training on the learned model
//! - [`policy`]: the policy library keyed by MDP transitions
//! - [`select`]: runtime task selection (safety backtracking + DP liveness)
//! - [`transfer`]: partial-library training and online gap filling
//! - [`sim`]: closed-loop execution with an independent safety monitor
//! - [`bounds`]: liveness-optimality gap constants and fine-grid value oracles
//! - [`config`]: run configuration, hashing, and artifact caching

pub mod bounds;
pub mod config;
pub mod dynamics;
pub mod error;
pub mod geom;
pub mod gp;
pub mod mdp;
pub mod partition;
pub mod policy;
pub mod ppo;
pub mod relu;
pub mod select;
pub mod sim;
pub mod transfer;

pub use error::{Error, Result};
