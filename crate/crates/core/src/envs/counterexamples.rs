//! Five-state MDPs on which the mixture value is non-concave in the weights
//! and on which the best mixture is not better at every state.
//!
//! States `s1..s5` are indices `0..5`; actions are `right`, `up`, `null`.
//! From `s1`, `right` leads to `s2` and `up` to the terminal `s3`. From
//! `s2`, `up` leads to the terminal `s4` collecting reward `r` and `right`
//! to the terminal `s5`. `null` keeps the current state. Terminal states
//! are absorbing with zero reward.
//!
//! The reference values of these instances are episodic returns, e.g.
//! `V(s1) = π(right|s1) π(up|s2) r`. Episodes end after at most two moves,
//! so the instances use [`EPISODIC_DISCOUNT`], which keeps the discounted
//! values within `1e-13 r` of the episodic ones.

use crate::error::Result;
use crate::mdp::{point_mass, FiniteMdp};
use crate::mixture::{ControllerSet, TabularController};

pub const RIGHT: usize = 0;
pub const UP: usize = 1;
pub const NULL: usize = 2;
pub const N_STATES: usize = 5;

/// Discount used to reproduce episodic values on the terminating instances.
pub const EPISODIC_DISCOUNT: f64 = 1.0 - 1e-13;

/// The five-state MDP with reward `r` on `s2 → s4`, started at `s1`.
pub fn five_state_mdp(reward: f64, discount: f64) -> Result<FiniteMdp> {
    let n = N_STATES;
    let mut transition = vec![vec![vec![0.0; n]; 3]; n];
    let mut rew = vec![vec![0.0; 3]; n];
    for (s, rows) in transition.iter_mut().enumerate() {
        for (a, row) in rows.iter_mut().enumerate() {
            let next = match (s, a) {
                (0, RIGHT) => 1,
                (0, UP) => 2,
                (1, UP) => 3,
                (1, RIGHT) => 4,
                _ => s,
            };
            row[next] = 1.0;
        }
    }
    rew[1][UP] = reward;
    let mdp = FiniteMdp::new(transition, rew, discount, point_mass(n, 0))?;
    Ok(mdp.with_costs_allowed(!(0.0..=1.0).contains(&reward)))
}

fn controller(s1_right: f64, s2_right: f64, label: &str) -> Result<TabularController> {
    let mut rows = vec![vec![s1_right, 1.0 - s1_right, 0.0], vec![s2_right, 1.0 - s2_right, 0.0]];
    rows.extend((2..N_STATES).map(|_| vec![0.0, 0.0, 1.0]));
    TabularController::from_rows(&rows, label)
}

/// Controllers witnessing non-concavity: `K1` rows `(1/4, 3/4, 0)`,
/// `(3/4, 1/4, 0)`; `K2` rows `(3/4, 1/4, 0)`, `(1/4, 3/4, 0)`.
pub fn non_concavity_controllers() -> Result<ControllerSet> {
    ControllerSet::tabular(vec![controller(0.25, 0.75, "K1")?, controller(0.75, 0.25, "K2")?])
}

/// Controllers witnessing non-monotonicity: `K1` plays `(1/4, 3/4, 0)` at
/// both decision states, `K2` plays `(3/4, 1/4, 0)`.
pub fn non_monotonicity_controllers() -> Result<ControllerSet> {
    ControllerSet::tabular(vec![controller(0.25, 0.25, "K1")?, controller(0.75, 0.75, "K2")?])
}

/// A reference value: `V(state)` under mixture weights `weights`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpectedValue {
    pub label: &'static str,
    pub weights: Vec<f64>,
    pub state: usize,
    pub value: f64,
}

/// An instance with its reference values.
#[derive(Debug, Clone)]
pub struct Counterexample {
    pub name: &'static str,
    pub mdp: FiniteMdp,
    pub controllers: ControllerSet,
    pub expected: Vec<ExpectedValue>,
}

/// The non-concavity and non-monotonicity instances for reward `r`.
pub fn counterexample_mdps(reward: f64) -> Result<Vec<Counterexample>> {
    let r = reward;
    let mdp = five_state_mdp(r, EPISODIC_DISCOUNT)?;
    let ev = |label, weights: [f64; 2], state, value| ExpectedValue { label, weights: weights.to_vec(), state, value };
    Ok(vec![
        Counterexample {
            name: "non-concavity",
            mdp: mdp.clone(),
            controllers: non_concavity_controllers()?,
            expected: vec![
                ev("V^{K1}(s1)", [1.0, 0.0], 0, r / 16.0),
                ev("V^{K2}(s1)", [0.0, 1.0], 0, 9.0 * r / 16.0),
                ev("V^{mix}(s1)", [0.5, 0.5], 0, r / 4.0),
            ],
        },
        Counterexample {
            name: "non-monotonicity",
            mdp,
            controllers: non_monotonicity_controllers()?,
            expected: vec![
                ev("V^{K1}(s1)", [1.0, 0.0], 0, 3.0 * r / 16.0),
                ev("V^{K2}(s1)", [0.0, 1.0], 0, 3.0 * r / 16.0),
                ev("V^{K1}(s2)", [1.0, 0.0], 1, 3.0 * r / 4.0),
                ev("V^{K*}(s1)", [0.5, 0.5], 0, r / 4.0),
                ev("V^{K*}(s2)", [0.5, 0.5], 1, r / 2.0),
            ],
        },
    ])
}

/// Episodic start value of the non-monotonicity instance when `K1` has
/// weight `w`: `π(right|s1) π(up|s2) r = (3 - 2w)(1 + 2w) r / 16`, which
/// peaks at `w = 1/2`.
pub fn non_monotonicity_value(w: f64, reward: f64) -> f64 {
    (3.0 - 2.0 * w) * (1.0 + 2.0 * w) * reward / 16.0
}
