//! Policy-gradient methods for learning improper mixtures of base
//! controllers.
//!
//! A fixed set of base controllers `K_1..K_M` is combined through softmax
//! weights `π = softmax(θ)`: at every step the learner draws a controller
//! from `π` and plays the action it proposes. The crate provides exact and
//! sampled gradient methods over `θ`, actor-critic variants, the
//! environments used to exercise them, and numerical checks of the
//! supporting inequalities.

// Guards like `!(x <= limit)` deliberately treat NaN as out of range.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod actor_critic;
pub mod diagnostics;
pub mod envs;
pub mod error;
pub mod harness;
pub mod mdp;
pub mod mixture;
pub mod pg;
pub mod rng;
pub mod trace;

pub use error::{Error, Result};
pub use mdp::{FiniteMdp, PolicyMatrix, ValueVector};
pub use mixture::{ControllerSet, MixtureWeights, TabularController};
