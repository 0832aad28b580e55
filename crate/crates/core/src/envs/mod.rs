//! Benchmark systems: queueing networks, tabular MDPs, the switched linear
//! cartpole model and bandit instances.

pub mod bandit;
pub mod chain;
pub mod counterexamples;
pub mod epls;
pub mod queue;

use crate::error::{Error, Result};
use crate::mdp::FiniteMdp;
use crate::mixture::sample_index;
use crate::rng::Rng;

/// A simulator the sample-based learners interact with.
///
/// The state is owned by the caller and advanced in place so rollouts do
/// not allocate.
pub trait Environment: Send + Sync {
    type State: Clone + Send + std::fmt::Debug;

    /// Draws an initial state from the start distribution.
    fn reset(&self, rng: &mut Rng) -> Self::State;

    /// Applies `action` and returns the reward of the transition.
    fn step(&self, state: &mut Self::State, action: usize, rng: &mut Rng) -> Result<f64>;

    /// Informs time-varying environments of the learner's global step.
    fn set_clock(&mut self, _step: u64) {}
}

/// A [`FiniteMdp`] simulated by sampling its transition rows.
#[derive(Debug, Clone)]
pub struct TabularEnv {
    mdp: FiniteMdp,
    start: Vec<f64>,
}

impl TabularEnv {
    /// Resets are drawn from the MDP's own start distribution.
    pub fn new(mdp: FiniteMdp) -> Self {
        let start = mdp.start_dist().to_vec();
        TabularEnv { mdp, start }
    }

    /// Resets are drawn from `start` instead.
    pub fn with_reset_dist(mdp: FiniteMdp, start: Vec<f64>) -> Result<Self> {
        crate::mdp::check_distribution(&start, "reset distribution")?;
        if start.len() != mdp.n_states() {
            return Err(Error::Argument("reset distribution has the wrong length".into()));
        }
        Ok(TabularEnv { mdp, start })
    }

    pub fn mdp(&self) -> &FiniteMdp {
        &self.mdp
    }
}

impl Environment for TabularEnv {
    type State = usize;

    fn reset(&self, rng: &mut Rng) -> usize {
        sample_index(&self.start, rng)
    }

    fn step(&self, state: &mut usize, action: usize, rng: &mut Rng) -> Result<f64> {
        if action >= self.mdp.n_actions() {
            return Err(Error::Argument(format!("action {action} out of range")));
        }
        let r = self.mdp.reward(*state, action);
        *state = sample_index(self.mdp.next_dist(*state, action), rng);
        Ok(r)
    }
}
