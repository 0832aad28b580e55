//! Seeded random streams.
//!
//! Every stochastic routine takes an explicit [`Rng`]. Independent streams are
//! derived from a master seed with ChaCha's stream selector, so a stream
//! depends only on `(master seed, trial, role)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Generator used throughout the crate.
pub type Rng = ChaCha8Rng;

/// Purpose of a random stream within one trial.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum StreamRole {
    /// Learner-side randomness: perturbation directions, controller draws.
    Learner = 1,
    /// Environment dynamics: arrivals, transitions, rewards.
    Environment = 2,
    /// Instance construction: random MDPs, gain perturbations.
    Instance = 3,
    /// Evaluation rollouts outside the learning loop.
    Evaluation = 4,
}

/// Stream for `(master, trial, role)`.
pub fn stream(master: u64, trial: u64, role: StreamRole) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream((trial << 8) | role as u64);
    rng
}

/// Plain generator from a single seed.
pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Seed handed to the learner of trial `trial` under master seed `master`.
pub fn trial_seed(master: u64, trial: u64) -> u64 {
    use rand::RngCore;
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(trial << 8);
    rng.next_u64()
}
