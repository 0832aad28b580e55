//! Ten-state chain where two controllers each hesitate at one gate.
//!
//! States `s1..s10` are indices `0..10`. Action `left` (index 0) advances
//! from `s_j` to `s_{j+1}`; action `right` (index 1) steps back to
//! `s_{j-1}` (staying put at `s1`). The only reward is 1 on the `s9 → s10`
//! move, and `s10` is absorbing. Controller `K1` advances with probability
//! 0.1 at `s5` and always elsewhere; `K2` does the same at `s6`. Their even
//! mixture passes both gates with probability 0.55 each and beats either
//! controller alone.

use crate::error::Result;
use crate::mdp::{point_mass, FiniteMdp};
use crate::mixture::{ControllerSet, TabularController};

pub const CHAIN_STATES: usize = 10;
pub const LEFT: usize = 0;
pub const RIGHT: usize = 1;
/// Probability of advancing at a controller's gate state.
pub const GATE_ADVANCE: f64 = 0.1;

/// The chain MDP started at `s1`.
pub fn chain_mdp(discount: f64) -> Result<FiniteMdp> {
    let n = CHAIN_STATES;
    let mut transition = vec![vec![vec![0.0; n]; 2]; n];
    let mut reward = vec![vec![0.0; 2]; n];
    for s in 0..n {
        if s == n - 1 {
            transition[s][LEFT][s] = 1.0;
            transition[s][RIGHT][s] = 1.0;
            continue;
        }
        transition[s][LEFT][s + 1] = 1.0;
        transition[s][RIGHT][s.saturating_sub(1)] = 1.0;
    }
    reward[n - 2][LEFT] = 1.0;
    FiniteMdp::new(transition, reward, discount, point_mass(n, 0))
}

/// Controller that advances with probability [`GATE_ADVANCE`] at the
/// 1-based state `gate` and deterministically elsewhere.
pub fn gate_controller(gate: usize, label: &str) -> Result<TabularController> {
    let rows: Vec<Vec<f64>> = (1..=CHAIN_STATES)
        .map(|j| match j {
            CHAIN_STATES => vec![0.0, 1.0],
            j if j == gate => vec![GATE_ADVANCE, 1.0 - GATE_ADVANCE],
            _ => vec![1.0, 0.0],
        })
        .collect();
    TabularController::from_rows(&rows, label)
}

/// Controllers `K1` (gate at `s5`) and `K2` (gate at `s6`).
pub fn chain_controllers() -> Result<ControllerSet> {
    ControllerSet::tabular(vec![gate_controller(5, "chain_k1")?, gate_controller(6, "chain_k2")?])
}

/// `V^{K1}(s1) = V^{K2}(s1) = 0.1 γ^8 / (1 - 0.9 γ^2)`.
pub fn single_controller_value(discount: f64) -> f64 {
    GATE_ADVANCE * discount.powi(8) / (1.0 - (1.0 - GATE_ADVANCE) * discount.powi(2))
}

/// `V(s1)` of the even mixture: `0.55^2 γ^8 / (1 - (0.45 + 0.55·0.45) γ^2)`.
///
/// A failed pass at either gate costs a two-step detour back to `s5`: the
/// first gate fails with probability 0.45, the second with 0.55·0.45.
pub fn even_mixture_value(discount: f64) -> f64 {
    let pass = 0.5 * (1.0 + GATE_ADVANCE);
    let fail = 1.0 - pass;
    pass * pass * discount.powi(8) / (1.0 - (fail + pass * fail) * discount.powi(2))
}
