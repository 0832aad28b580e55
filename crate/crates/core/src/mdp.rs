//! Tabular Markov decision processes with exact policy evaluation.
//!
//! Values, action values and discounted visitation measures are obtained by
//! dense LU solves rather than iteration, so they can serve as oracles for
//! the gradient and lemma checks elsewhere in the crate.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{arg, ensure, Error, Result};

/// Tolerance for row sums of stochastic matrices and distributions.
pub const STOCHASTIC_TOL: f64 = 1e-12;
/// Largest Bellman residual accepted from a policy-evaluation solve.
pub const RESIDUAL_TOL: f64 = 1e-10;

/// A finite discounted MDP.
///
/// Transitions are stored flat as `p[(s * n_actions + a) * n_states + s']`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MdpDocument", into = "MdpDocument")]
pub struct FiniteMdp {
    n_states: usize,
    n_actions: usize,
    p: Vec<f64>,
    r: Vec<f64>,
    discount: f64,
    start: Vec<f64>,
    allow_costs: bool,
}

/// On-disk JSON layout of a [`FiniteMdp`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MdpDocument {
    pub n_states: usize,
    pub n_actions: usize,
    pub transition: Vec<Vec<Vec<f64>>>,
    pub reward: Vec<Vec<f64>>,
    pub discount: f64,
    pub start_dist: Vec<f64>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub allow_costs: bool,
}

impl TryFrom<MdpDocument> for FiniteMdp {
    type Error = Error;

    fn try_from(doc: MdpDocument) -> Result<Self> {
        let mut mdp = FiniteMdp::new(doc.transition, doc.reward, doc.discount, doc.start_dist)?;
        mdp.allow_costs = doc.allow_costs;
        ensure(mdp.n_states == doc.n_states && mdp.n_actions == doc.n_actions, || {
            format!(
                "declared shape ({}, {}) disagrees with arrays ({}, {})",
                doc.n_states, doc.n_actions, mdp.n_states, mdp.n_actions
            )
        })?;
        Ok(mdp)
    }
}

impl From<FiniteMdp> for MdpDocument {
    fn from(mdp: FiniteMdp) -> Self {
        let (ns, na) = (mdp.n_states, mdp.n_actions);
        let transition = (0..ns)
            .map(|s| (0..na).map(|a| mdp.next_dist(s, a).to_vec()).collect())
            .collect();
        let reward = (0..ns).map(|s| mdp.r[s * na..(s + 1) * na].to_vec()).collect();
        MdpDocument {
            n_states: ns,
            n_actions: na,
            transition,
            reward,
            discount: mdp.discount,
            start_dist: mdp.start,
            allow_costs: mdp.allow_costs,
        }
    }
}

pub(crate) fn check_distribution(d: &[f64], what: &str) -> Result<()> {
    let mut sum = 0.0;
    for (i, &x) in d.iter().enumerate() {
        if !x.is_finite() || x < 0.0 {
            return arg(format!("{what}: entry {i} = {x} is not a probability"));
        }
        sum += x;
    }
    ensure((sum - 1.0).abs() <= STOCHASTIC_TOL, || format!("{what}: sums to {sum}, expected 1"))
}

impl FiniteMdp {
    /// Builds and validates an MDP from nested `transition[s][a][s']` and
    /// `reward[s][a]` arrays.
    pub fn new(
        transition: Vec<Vec<Vec<f64>>>,
        reward: Vec<Vec<f64>>,
        discount: f64,
        start_dist: Vec<f64>,
    ) -> Result<Self> {
        let ns = transition.len();
        ensure(ns > 0, || "an MDP needs at least one state".into())?;
        let na = transition[0].len();
        ensure(na > 0, || "an MDP needs at least one action".into())?;
        ensure(discount > 0.0 && discount < 1.0, || {
            format!("discount {discount} must lie strictly inside (0, 1)")
        })?;
        ensure(reward.len() == ns, || format!("reward has {} rows, expected {ns}", reward.len()))?;
        ensure(start_dist.len() == ns, || {
            format!("start distribution has {} entries, expected {ns}", start_dist.len())
        })?;
        check_distribution(&start_dist, "start distribution")?;

        let mut p = Vec::with_capacity(ns * na * ns);
        let mut r = Vec::with_capacity(ns * na);
        for (s, (rows, rew)) in transition.iter().zip(&reward).enumerate() {
            ensure(rows.len() == na && rew.len() == na, || {
                format!("state {s}: expected {na} actions")
            })?;
            for (a, row) in rows.iter().enumerate() {
                ensure(row.len() == ns, || format!("P[{s}][{a}] has {} entries", row.len()))?;
                check_distribution(row, &format!("P[{s}][{a}]"))?;
                p.extend_from_slice(row);
            }
            for (a, &x) in rew.iter().enumerate() {
                ensure(x.is_finite(), || format!("reward[{s}][{a}] = {x} is not finite"))?;
                r.push(x);
            }
        }
        Ok(FiniteMdp { n_states: ns, n_actions: na, p, r, discount, start: start_dist, allow_costs: false })
    }

    /// Marks the instance as a cost model whose rewards may leave `[0, 1]`.
    pub fn with_costs_allowed(mut self, allow: bool) -> Self {
        self.allow_costs = allow;
        self
    }

    /// Replaces the discount factor, keeping everything else.
    pub fn with_discount(mut self, discount: f64) -> Result<Self> {
        ensure(discount > 0.0 && discount < 1.0, || {
            format!("discount {discount} must lie strictly inside (0, 1)")
        })?;
        self.discount = discount;
        Ok(self)
    }

    /// Replaces the start distribution.
    pub fn with_start(mut self, start: Vec<f64>) -> Result<Self> {
        ensure(start.len() == self.n_states, || "start distribution has the wrong length".into())?;
        check_distribution(&start, "start distribution")?;
        self.start = start;
        Ok(self)
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn start_dist(&self) -> &[f64] {
        &self.start
    }

    pub fn allow_costs(&self) -> bool {
        self.allow_costs
    }

    /// Distribution of the next state after playing `a` in `s`.
    pub fn next_dist(&self, s: usize, a: usize) -> &[f64] {
        let off = (s * self.n_actions + a) * self.n_states;
        &self.p[off..off + self.n_states]
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.r[s * self.n_actions + a]
    }

    /// Rejects rewards outside `[0, 1]` unless the instance is flagged as a
    /// cost model.
    pub fn check_reward_range(&self) -> Result<()> {
        if self.allow_costs {
            return Ok(());
        }
        match self.r.iter().position(|&x| !(0.0..=1.0).contains(&x)) {
            None => Ok(()),
            Some(i) => arg(format!(
                "reward[{}][{}] = {} outside [0, 1]; set allow_costs for cost models",
                i / self.n_actions,
                i % self.n_actions,
                self.r[i]
            )),
        }
    }

    fn check_policy(&self, policy: &PolicyMatrix) -> Result<()> {
        ensure(
            policy.n_states() == self.n_states && policy.n_actions() == self.n_actions,
            || {
                format!(
                    "policy is {}x{}, MDP is {}x{}",
                    policy.n_states(),
                    policy.n_actions(),
                    self.n_states,
                    self.n_actions
                )
            },
        )
    }

    /// State-to-state kernel and expected reward under `policy`.
    pub fn policy_kernel(&self, policy: &PolicyMatrix) -> Result<(DMatrix<f64>, DVector<f64>)> {
        self.check_policy(policy)?;
        let ns = self.n_states;
        let mut kernel = DMatrix::zeros(ns, ns);
        let mut rew = DVector::zeros(ns);
        for s in 0..ns {
            for a in 0..self.n_actions {
                let w = policy.prob(s, a);
                if w == 0.0 {
                    continue;
                }
                rew[s] += w * self.reward(s, a);
                for (s2, &q) in self.next_dist(s, a).iter().enumerate() {
                    kernel[(s, s2)] += w * q;
                }
            }
        }
        Ok((kernel, rew))
    }

    /// Exact value of `policy`: the solution of `(I - γ P_π) V = r_π`.
    pub fn evaluate_policy(&self, policy: &PolicyMatrix) -> Result<ValueVector> {
        let (kernel, rew) = self.policy_kernel(policy)?;
        let sys = DMatrix::identity(self.n_states, self.n_states) - kernel * self.discount;
        let v = solve_refined(&sys, &rew, "policy evaluation", Scale::Absolute)?;
        Ok(ValueVector(v))
    }

    /// `Q(s, a) = r(s, a) + γ Σ_s' P(s'|s, a) V(s')`.
    pub fn q_values(&self, values: &ValueVector) -> Result<DMatrix<f64>> {
        ensure(values.len() == self.n_states, || {
            format!("value vector has {} entries, expected {}", values.len(), self.n_states)
        })?;
        let mut q = DMatrix::zeros(self.n_states, self.n_actions);
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                let cont: f64 = self.next_dist(s, a).iter().zip(values.iter()).map(|(p, v)| p * v).sum();
                q[(s, a)] = self.reward(s, a) + self.discount * cont;
            }
        }
        Ok(q)
    }

    /// Normalized discounted state-visitation measure started from `mu`:
    /// the solution of `(I - γ P_πᵀ) d = (1 - γ) μ`.
    pub fn visitation_measure(&self, policy: &PolicyMatrix, mu: &[f64]) -> Result<VisitationMeasure> {
        ensure(mu.len() == self.n_states, || {
            format!("anchor distribution has {} entries, expected {}", mu.len(), self.n_states)
        })?;
        check_distribution(mu, "anchor distribution")?;
        let (kernel, _) = self.policy_kernel(policy)?;
        let sys = DMatrix::identity(self.n_states, self.n_states) - kernel.transpose() * self.discount;
        // Solve for the unnormalized occupancy first: its transient entries
        // stay O(1) even when γ is within round-off of 1.
        let mu_vec = DVector::from_column_slice(mu);
        let occupancy = solve_refined(&sys, &mu_vec, "visitation measure", Scale::Relative)?;
        let mut d = occupancy * (1.0 - self.discount);
        let res = (&sys * &d - mu_vec * (1.0 - self.discount)).amax();
        if !res.is_finite() || res > RESIDUAL_TOL {
            return Err(Error::Numeric(format!("visitation measure: residual {res:e} above tolerance")));
        }
        // Round-off can leave entries at -1e-17 on unreachable states.
        for x in d.iter_mut() {
            if *x < 0.0 && *x > -1e-12 {
                *x = 0.0;
            }
        }
        Ok(VisitationMeasure { d, anchor: mu.to_vec() })
    }
}

#[derive(Clone, Copy)]
enum Scale {
    /// Residual must be below [`RESIDUAL_TOL`].
    Absolute,
    /// Residual must be below [`RESIDUAL_TOL`] times `max(1, |x|_∞)`.
    Relative,
}

/// LU solve followed by iterative refinement while the residual is above
/// tolerance.
fn solve_refined(sys: &DMatrix<f64>, rhs: &DVector<f64>, what: &str, scale: Scale) -> Result<DVector<f64>> {
    if sys.iter().chain(rhs.iter()).any(|x| !x.is_finite()) {
        return Err(Error::Numeric(format!("{what}: non-finite input")));
    }
    let lu = sys.clone().lu();
    let mut x = lu
        .solve(rhs)
        .ok_or_else(|| Error::Numeric(format!("{what}: singular system")))?;
    let tol = |x: &DVector<f64>| match scale {
        Scale::Absolute => RESIDUAL_TOL,
        Scale::Relative => RESIDUAL_TOL * x.amax().max(1.0),
    };
    for _ in 0..2 {
        let res = rhs - sys * &x;
        if res.amax() <= tol(&x) {
            break;
        }
        if let Some(dx) = lu.solve(&res) {
            x += dx;
        }
    }
    let res = (rhs - sys * &x).amax();
    if !res.is_finite() || res > tol(&x) {
        return Err(Error::Numeric(format!("{what}: residual {res:e} above tolerance")));
    }
    Ok(x)
}

/// A stationary state-to-action-distribution map `π[s][a]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyMatrix(DMatrix<f64>);

impl PolicyMatrix {
    /// Validates that each row is a distribution.
    pub fn new(probs: DMatrix<f64>) -> Result<Self> {
        for s in 0..probs.nrows() {
            let row: Vec<f64> = probs.row(s).iter().copied().collect();
            check_distribution(&row, &format!("policy row {s}"))?;
        }
        Ok(PolicyMatrix(probs))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        ensure(!rows.is_empty(), || "policy needs at least one row".into())?;
        let na = rows[0].len();
        ensure(rows.iter().all(|r| r.len() == na), || "ragged policy rows".into())?;
        Self::new(DMatrix::from_fn(rows.len(), na, |s, a| rows[s][a]))
    }

    /// Wraps a matrix whose rows are already known to be distributions.
    pub(crate) fn from_matrix_unchecked(probs: DMatrix<f64>) -> Self {
        PolicyMatrix(probs)
    }

    pub fn n_states(&self) -> usize {
        self.0.nrows()
    }

    pub fn n_actions(&self) -> usize {
        self.0.ncols()
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.0[(s, a)]
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }
}

/// State values `V(s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueVector(pub DVector<f64>);

impl std::ops::Deref for ValueVector {
    type Target = DVector<f64>;
    fn deref(&self) -> &DVector<f64> {
        &self.0
    }
}

/// Discounted state-visitation measure `d_μ^π` and the anchor it was
/// computed from.
#[derive(Debug, Clone, PartialEq)]
pub struct VisitationMeasure {
    pub d: DVector<f64>,
    pub anchor: Vec<f64>,
}

/// `distᵀ values`.
pub fn scalar_value(values: &ValueVector, dist: &[f64]) -> Result<f64> {
    ensure(values.len() == dist.len(), || {
        format!("distribution has {} entries, values have {}", dist.len(), values.len())
    })?;
    check_distribution(dist, "distribution")?;
    Ok(values.iter().zip(dist).map(|(v, p)| v * p).sum())
}

/// One-hot distribution over `n` states.
pub fn point_mass(n: usize, s: usize) -> Vec<f64> {
    let mut d = vec![0.0; n];
    d[s] = 1.0;
    d
}
