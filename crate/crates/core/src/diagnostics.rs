//! Numerical checks of the structural properties of mixture values, and
//! run-level metrics.
//!
//! Every check compares two independently computed quantities: the gradient
//! formula against finite differences, the value-difference identities
//! against direct evaluation, the gradient-domination inequality against a
//! brute-force optimum, and the smoothness constant against second
//! differences.

use nalgebra::Matrix4;
use rand::Rng as _;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::envs::counterexamples::{counterexample_mdps, five_state_mdp, non_concavity_controllers, non_monotonicity_controllers, EPISODIC_DISCOUNT};
use crate::envs::epls::{EplsSystem, Trajectory};
use crate::error::{arg, ensure, Error, Result};
use crate::mdp::{point_mass, scalar_value, FiniteMdp};
use crate::mixture::{
    exact_value_gradient, finite_difference_gradient, induced_policy, mixture_value, softmax, tilde_q_advantage,
    value_at_theta, ControllerSet, MixtureWeights, TabularController,
};
use crate::pg::norm;
use crate::rng::Rng;
use crate::trace::RunTrace;

/// Weights at or below this are treated as outside the optimal support.
pub const SUPPORT_THRESHOLD: f64 = 1e-6;

/// Outcome of one lemma check over a family of instances.
///
/// `max_violation` is the largest `observed - allowed` margin seen; a
/// negative value means every instance passed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LemmaReport {
    pub lemma: String,
    pub instances: usize,
    /// Instances not checked because a precondition failed.
    #[serde(default)]
    pub skipped: usize,
    pub max_violation: f64,
    /// The worst-case input, replayable through the library.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub witness: Option<serde_json::Value>,
}

impl LemmaReport {
    pub fn new(lemma: impl Into<String>) -> Self {
        LemmaReport { lemma: lemma.into(), instances: 0, skipped: 0, max_violation: f64::NEG_INFINITY, witness: None }
    }

    pub fn passed(&self) -> bool {
        self.instances > 0 && self.max_violation < 0.0
    }

    /// Folds in one checked instance; keeps the witness of the worst one.
    pub fn observe(&mut self, violation: f64, witness: impl FnOnce() -> serde_json::Value) {
        self.instances += 1;
        let violation = if violation.is_nan() { f64::INFINITY } else { violation };
        if violation > self.max_violation {
            self.max_violation = violation;
            self.witness = Some(witness());
        }
    }
}

/// Both sides of a checked inequality or identity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LemmaCheck {
    pub lhs: f64,
    pub rhs: f64,
    /// `observed - allowed`; negative means the check passed.
    pub violation: f64,
}

/// Compositions of `n` into `parts` nonnegative integers, in lexicographic
/// order.
fn compositions(n: usize, parts: usize, f: &mut impl FnMut(&[usize])) {
    fn rec(rem: usize, idx: usize, cur: &mut Vec<usize>, f: &mut impl FnMut(&[usize])) {
        if idx + 1 == cur.len() {
            cur[idx] = rem;
            f(cur);
            return;
        }
        for k in 0..=rem {
            cur[idx] = k;
            rec(rem - k, idx + 1, cur, f);
        }
    }
    let mut cur = vec![0; parts];
    rec(n, 0, &mut cur, f);
}

/// Default grid resolution for `M` controllers.
pub fn default_grid(m: usize) -> usize {
    if m <= 3 {
        200
    } else {
        40
    }
}

/// Best mixture by exhaustive search over `{k/N}` simplex points followed
/// by a pattern search that moves mass between pairs of controllers with a
/// halving step. Supports `M ≤ 4`.
pub fn brute_force_optimal_mixture(
    mdp: &FiniteMdp,
    controllers: &ControllerSet,
    rho: &[f64],
    grid: Option<usize>,
) -> Result<(MixtureWeights, f64)> {
    let m = controllers.len();
    if m > 4 {
        return Err(Error::Unsupported(format!("brute-force search supports at most 4 controllers, got {m}")));
    }
    if m == 1 {
        let v = mixture_value(mdp, controllers, &[1.0], rho)?;
        return Ok((MixtureWeights::uniform(1), v));
    }
    let n = grid.unwrap_or_else(|| default_grid(m));
    ensure(n >= 1, || "grid resolution must be at least 1".into())?;
    let mut best = (vec![1.0 / m as f64; m], f64::NEG_INFINITY);
    let mut err = None;
    let mut pi = vec![0.0; m];
    compositions(n, m, &mut |c| {
        if err.is_some() {
            return;
        }
        for (p, &k) in pi.iter_mut().zip(c) {
            *p = k as f64 / n as f64;
        }
        match mixture_value(mdp, controllers, &pi, rho) {
            Ok(v) if v > best.1 => best = (pi.clone(), v),
            Ok(_) => {}
            Err(e) => err = Some(e),
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    let (mut pi, mut value) = best;
    let mut step = 1.0 / n as f64;
    let mut probe = pi.clone();
    let mut iters = 0;
    while step > 1e-12 && iters < 100_000 {
        iters += 1;
        let mut improved = false;
        for i in 0..m {
            for j in 0..m {
                let shift = step.min(pi[i]);
                if i == j || shift <= 0.0 {
                    continue;
                }
                probe.copy_from_slice(&pi);
                probe[i] -= shift;
                probe[j] += shift;
                let v = mixture_value(mdp, controllers, &probe, rho)?;
                if v > value {
                    pi.copy_from_slice(&probe);
                    value = v;
                    improved = true;
                }
            }
        }
        if !improved {
            step /= 2.0;
        }
    }
    let total: f64 = pi.iter().sum();
    pi.iter_mut().for_each(|p| *p = p.max(0.0) / total);
    let value = mixture_value(mdp, controllers, &pi, rho)?;
    Ok((MixtureWeights::new(pi)?, value))
}

/// `min_s Σ_m π*(m) Ã^{π_θ}(s, m)`: nonnegative when the positivity of
/// advantage assumption holds at `θ`.
pub fn advantage_positivity(mdp: &FiniteMdp, controllers: &ControllerSet, theta: &[f64], pi_star: &[f64]) -> Result<f64> {
    let pi = softmax(theta)?;
    let tv = tilde_q_advantage(mdp, controllers, &pi)?;
    Ok((0..mdp.n_states())
        .map(|s| pi_star.iter().enumerate().map(|(m, p)| p * tv.adv[(s, m)]).sum::<f64>())
        .fold(f64::INFINITY, f64::min))
}

/// Result of a gradient-domination check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LojasiewiczOutcome {
    Checked(LemmaCheck),
    /// The positivity-of-advantage assumption fails at this `θ`.
    AssumptionFailed { min_advantage: f64 },
    /// `d_μ^{π_θ}` vanishes somewhere `d_ρ^{π*}` does not.
    Rejected,
}

/// Checks `‖∇V^{π_θ}(μ)‖₂ ≥ (1/√M) (min_{m ∈ supp π*} π_θ(m))
/// ‖d_ρ^{π*}/d_μ^{π_θ}‖_∞⁻¹ (V^{π*}(ρ) - V^{π_θ}(ρ))`.
///
/// The violation is `RHS - LHS - 1e-10`.
pub fn check_lojasiewicz(
    mdp: &FiniteMdp,
    controllers: &ControllerSet,
    theta: &[f64],
    pi_star: &[f64],
    rho: &[f64],
    mu: &[f64],
) -> Result<LojasiewiczOutcome> {
    let min_adv = advantage_positivity(mdp, controllers, theta, pi_star)?;
    if min_adv < -1e-10 {
        return Ok(LojasiewiczOutcome::AssumptionFailed { min_advantage: min_adv });
    }
    let m = controllers.len();
    let pi = softmax(theta)?;
    let grad = exact_value_gradient(mdp, controllers, theta, mu)?;
    let lhs = norm(&grad);
    let d_star = mdp.visitation_measure(&induced_policy(controllers, pi_star)?, rho)?.d;
    let d_theta = mdp.visitation_measure(&induced_policy(controllers, &pi)?, mu)?.d;
    let mut ratio: f64 = 0.0;
    for s in 0..mdp.n_states() {
        if d_star[s] > 0.0 {
            if d_theta[s] <= 0.0 {
                return Ok(LojasiewiczOutcome::Rejected);
            }
            ratio = ratio.max(d_star[s] / d_theta[s]);
        }
    }
    let c = pi
        .iter()
        .zip(pi_star)
        .filter(|(_, &ps)| ps > SUPPORT_THRESHOLD)
        .map(|(&p, _)| p)
        .fold(f64::INFINITY, f64::min);
    let gap = mixture_value(mdp, controllers, pi_star, rho)? - mixture_value(mdp, controllers, &pi, rho)?;
    let rhs = c / (m as f64).sqrt() / ratio * gap;
    Ok(LojasiewiczOutcome::Checked(LemmaCheck { lhs, rhs, violation: rhs - lhs - 1e-10 }))
}

/// `(7γ² + 4γ + 5) / (2(1-γ)³)`.
pub fn smoothness_bound(discount: f64) -> f64 {
    let g = discount;
    (7.0 * g * g + 4.0 * g + 5.0) / (2.0 * (1.0 - g).powi(3))
}

/// `5 / (2(1-γ))`, the smoothness constant of the bandit value.
pub fn bandit_smoothness_bound(discount: f64) -> f64 {
    5.0 / (2.0 * (1.0 - discount))
}

/// Step of the second-difference probes.
pub const SMOOTHNESS_STEP: f64 = 1e-3;

/// Largest `|V(θ+hu) - 2V(θ) + V(θ-hu)| / h²` over `probes` random unit
/// directions, measured from the MDP's start distribution, against `bound`
/// plus `1e-3`.
pub fn check_smoothness(
    mdp: &FiniteMdp,
    controllers: &ControllerSet,
    theta: &[f64],
    probes: usize,
    bound: f64,
    rng: &mut Rng,
) -> Result<LemmaCheck> {
    let mu = mdp.start_dist().to_vec();
    let h = SMOOTHNESS_STEP;
    let v0 = value_at_theta(mdp, controllers, theta, &mu)?;
    let mut worst: f64 = 0.0;
    let mut probe = theta.to_vec();
    for _ in 0..probes {
        let u = crate::pg::unit_sphere(theta.len(), rng);
        for (p, (t, u)) in probe.iter_mut().zip(theta.iter().zip(&u)) {
            *p = t + h * u;
        }
        let up = value_at_theta(mdp, controllers, &probe, &mu)?;
        for (p, (t, u)) in probe.iter_mut().zip(theta.iter().zip(&u)) {
            *p = t - h * u;
        }
        let down = value_at_theta(mdp, controllers, &probe, &mu)?;
        worst = worst.max(((up - 2.0 * v0 + down) / (h * h)).abs());
    }
    Ok(LemmaCheck { lhs: worst, rhs: bound, violation: worst - bound - 1e-3 })
}

/// The three ways of computing `V^{π'}(s) - V^{π}(s)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValueDifference {
    pub direct: f64,
    /// `(1/(1-γ)) Σ_{s'} d_s^{π'}(s') Σ_m π'(m) Ã^{π}(s', m)`.
    pub advantage_form: f64,
    /// `(1/(1-γ)) Σ_{s'} d_s^{π}(s') Σ_m (π'(m) - π(m)) Q̃^{π'}(s', m)`.
    pub q_form: f64,
}

impl ValueDifference {
    /// Largest disagreement of either identity with direct evaluation.
    pub fn discrepancy(&self) -> f64 {
        (self.advantage_form - self.direct).abs().max((self.q_form - self.direct).abs())
    }
}

pub fn check_value_difference(
    mdp: &FiniteMdp,
    controllers: &ControllerSet,
    pi: &[f64],
    pi_prime: &[f64],
    s: usize,
) -> Result<ValueDifference> {
    ensure(s < mdp.n_states(), || format!("state {s} out of range"))?;
    let scale = 1.0 / (1.0 - mdp.discount());
    let e_s = point_mass(mdp.n_states(), s);
    let tv = tilde_q_advantage(mdp, controllers, pi)?;
    let tv_prime = tilde_q_advantage(mdp, controllers, pi_prime)?;
    let d_prime = mdp.visitation_measure(&induced_policy(controllers, pi_prime)?, &e_s)?.d;
    let d = mdp.visitation_measure(&induced_policy(controllers, pi)?, &e_s)?.d;
    let mut adv_form = 0.0;
    let mut q_form = 0.0;
    for sp in 0..mdp.n_states() {
        for m in 0..pi.len() {
            adv_form += d_prime[sp] * pi_prime[m] * tv.adv[(sp, m)];
            q_form += d[sp] * (pi_prime[m] - pi[m]) * tv_prime.q[(sp, m)];
        }
    }
    Ok(ValueDifference { direct: tv_prime.v[s] - tv.v[s], advantage_form: scale * adv_form, q_form: scale * q_form })
}

/// `max_s |Σ_m π(m) Ã(s, m)|`.
pub fn advantage_centering(mdp: &FiniteMdp, controllers: &ControllerSet, pi: &[f64]) -> Result<f64> {
    let tv = tilde_q_advantage(mdp, controllers, pi)?;
    Ok((0..mdp.n_states())
        .map(|s| pi.iter().enumerate().map(|(m, p)| p * tv.adv[(s, m)]).sum::<f64>().abs())
        .fold(0.0, f64::max))
}

/// Cumulative suboptimality `R(t) = Σ_{s≤t} (V* - V_s)` of a trace holding
/// exact values at consecutive steps.
pub fn regret(trace: &RunTrace, v_star: f64) -> Result<Vec<f64>> {
    if !trace.exact_values {
        return Err(Error::Unsupported("regret needs a trace with exact values".into()));
    }
    let mut out = Vec::with_capacity(trace.records.len());
    let mut acc = 0.0;
    for (i, r) in trace.records.iter().enumerate() {
        if i > 0 && r.step != trace.records[i - 1].step + 1 {
            return arg(format!("trace skips from step {} to {}", trace.records[i - 1].step, r.step));
        }
        acc += v_star - r.value;
        out.push(acc);
    }
    Ok(out)
}

/// `min{5M² log T / (1-γ), M √(5T/(1-γ))}`.
pub fn regret_envelope(m: usize, discount: f64, t: u64) -> f64 {
    let (m, t) = (m as f64, t as f64);
    let a = 5.0 * m * m * t.ln() / (1.0 - discount);
    let b = m * (5.0 * t / (1.0 - discount)).sqrt();
    a.min(b)
}

/// Running minimum of the weight on the optimal support.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CtSeries {
    pub per_trial: Vec<Vec<f64>>,
    /// Trial average at each record index.
    pub mean: Vec<f64>,
    /// Minimum over trials and steps.
    pub global_min: f64,
}

/// Per-trial running minima `c̄_t = min_{s≤t} min_{m ∈ supp π*} π_s(m)`.
/// Trials are aligned by record index and truncated to the shortest.
pub fn ct_series(traces: &[RunTrace], pi_star: &[f64]) -> Result<CtSeries> {
    let support: Vec<usize> = (0..pi_star.len()).filter(|&m| pi_star[m] > SUPPORT_THRESHOLD).collect();
    if support.is_empty() {
        return arg("optimal mixture has empty support");
    }
    ensure(!traces.is_empty(), || "no traces".into())?;
    let len = traces.iter().map(|t| t.records.len()).min().unwrap_or(0);
    let mut per_trial = Vec::with_capacity(traces.len());
    for tr in traces {
        let mut run = f64::INFINITY;
        let series: Vec<f64> = tr.records[..len]
            .iter()
            .map(|r| {
                let here = support.iter().map(|&m| r.pi[m]).fold(f64::INFINITY, f64::min);
                run = run.min(here);
                run
            })
            .collect();
        per_trial.push(series);
    }
    let mean: Vec<f64> = (0..len)
        .map(|i| per_trial.iter().map(|s| s[i]).sum::<f64>() / per_trial.len() as f64)
        .collect();
    let global_min = per_trial.iter().flat_map(|s| s.last()).copied().fold(f64::INFINITY, f64::min);
    Ok(CtSeries { per_trial, mean, global_min })
}

/// Largest singular value of a 4x4 matrix.
pub fn spectral_norm(a: &Matrix4<f64>) -> f64 {
    a.singular_values().max()
}

/// `Σ_i p_i log ‖A(i)‖₂`.
pub fn lyapunov_bound(sys: &EplsSystem, probs: &[f64]) -> Result<f64> {
    sys.validate()?;
    ensure(probs.len() == sys.gains.len(), || "one probability per gain required".into())?;
    Ok(sys
        .closed_loops()
        .iter()
        .zip(probs)
        .filter(|(_, &p)| p > 0.0)
        .map(|(a, p)| p * spectral_norm(a).ln())
        .sum())
}

/// Growth-rate estimate of a trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LyapunovEstimate {
    pub exponent: f64,
    /// The final norm underflowed and was clamped to `1e-300`.
    pub clamped: bool,
}

/// `(1/T) log(‖x(T)‖ / ‖x(0)‖)` for `T = states.len() - 1`.
pub fn empirical_lyapunov(traj: &Trajectory) -> Result<LyapunovEstimate> {
    ensure(traj.states.len() >= 2, || "trajectory needs at least two states".into())?;
    let n0 = traj.states[0].norm();
    ensure(n0 > 0.0, || "initial state must be nonzero".into())?;
    let nt = traj.states[traj.states.len() - 1].norm();
    let clamped = !(nt >= 1e-300);
    let nt = if clamped { 1e-300 } else { nt };
    let t = (traj.states.len() - 1) as f64;
    Ok(LyapunovEstimate { exponent: (nt / n0).ln() / t, clamped })
}

/// `½V(θ¹) + ½V(θ²) - V((θ¹+θ²)/2)` on the non-concavity instance with
/// reward `r`, for the direct weights `e₁, e₂` and for the softmax pair
/// `θ¹ = (log(1-ε), log ε)`, `θ² = (log ε, log(1-ε))`. Positive values
/// witness non-concavity.
pub fn non_concavity_gaps(reward: f64, eps: f64) -> Result<(f64, f64)> {
    let mdp = five_state_mdp(reward, EPISODIC_DISCOUNT)?;
    let ks = non_concavity_controllers()?;
    let start = mdp.start_dist().to_vec();
    let v = |pi: &[f64]| mixture_value(&mdp, &ks, pi, &start);
    let direct = 0.5 * v(&[1.0, 0.0])? + 0.5 * v(&[0.0, 1.0])? - v(&[0.5, 0.5])?;
    let t1 = [(1.0 - eps).ln(), eps.ln()];
    let t2 = [eps.ln(), (1.0 - eps).ln()];
    let mid = [(t1[0] + t2[0]) / 2.0, (t1[1] + t2[1]) / 2.0];
    let vt = |t: &[f64]| value_at_theta(&mdp, &ks, t, &start);
    let soft = 0.5 * vt(&t1)? + 0.5 * vt(&t2)? - vt(&mid)?;
    Ok((direct, soft))
}

/// Values `(V^{K1}(s1), V^{K1}(s2), V^{K*}(s1), V^{K*}(s2))` on the
/// non-monotonicity instance with `K* = (K1 + K2)/2`.
pub fn non_monotonicity_values(reward: f64) -> Result<[f64; 4]> {
    let mdp = five_state_mdp(reward, EPISODIC_DISCOUNT)?;
    let ks = non_monotonicity_controllers()?;
    let v1 = mdp.evaluate_policy(&induced_policy(&ks, &[1.0, 0.0])?)?;
    let vs = mdp.evaluate_policy(&induced_policy(&ks, &[0.5, 0.5])?)?;
    Ok([v1[0], v1[1], vs[0], vs[1]])
}

/// Size limits of randomly generated tabular instances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InstanceDims {
    pub max_states: usize,
    pub max_actions: usize,
    pub max_controllers: usize,
}

impl Default for InstanceDims {
    fn default() -> Self {
        InstanceDims { max_states: 8, max_actions: 4, max_controllers: 4 }
    }
}

/// A random tabular instance with a full-support distribution `mu`.
#[derive(Debug, Clone)]
pub struct RandomInstance {
    pub mdp: FiniteMdp,
    pub controllers: ControllerSet,
    pub mu: Vec<f64>,
}

impl RandomInstance {
    /// JSON form used as a lemma witness.
    pub fn to_json(&self, extra: serde_json::Value) -> serde_json::Value {
        let controllers = self
            .controllers
            .to_json()
            .ok()
            .and_then(|s| serde_json::from_str::<serde_json::Value>(&s).ok())
            .unwrap_or(serde_json::Value::Null);
        serde_json::json!({
            "mdp": serde_json::to_value(&self.mdp).unwrap_or(serde_json::Value::Null),
            "controllers": controllers,
            "mu": self.mu,
            "extra": extra,
        })
    }
}

fn dirichlet_row(n: usize, rng: &mut Rng) -> Vec<f64> {
    let g = Gamma::new(1.0, 1.0).expect("valid shape");
    let mut row: Vec<f64> = (0..n).map(|_| g.sample(rng) + 1e-3).collect();
    let z: f64 = row.iter().sum();
    row.iter_mut().for_each(|x| *x /= z);
    let err = 1.0 - row.iter().sum::<f64>();
    row[0] += err;
    row
}

/// Draws a random instance: transition rows and controller rows from a flat
/// Dirichlet, rewards uniform on `[0, 1]`, discount from `discounts`.
pub fn random_instance(dims: InstanceDims, discounts: &[f64], rng: &mut Rng) -> Result<RandomInstance> {
    let ns = rng.random_range(2..=dims.max_states.max(2));
    let na = rng.random_range(2..=dims.max_actions.max(2));
    let nm = rng.random_range(2..=dims.max_controllers.max(2));
    let discount = discounts[rng.random_range(0..discounts.len())];
    let transition: Vec<Vec<Vec<f64>>> = (0..ns).map(|_| (0..na).map(|_| dirichlet_row(ns, rng)).collect()).collect();
    let reward: Vec<Vec<f64>> = (0..ns).map(|_| (0..na).map(|_| rng.random::<f64>()).collect()).collect();
    let start = dirichlet_row(ns, rng);
    let mdp = FiniteMdp::new(transition, reward, discount, start)?;
    let ks = (0..nm)
        .map(|m| {
            let rows: Vec<Vec<f64>> = (0..ns).map(|_| dirichlet_row(na, rng)).collect();
            TabularController::from_rows(&rows, format!("K{}", m + 1))
        })
        .collect::<Result<Vec<_>>>()?;
    let mu = dirichlet_row(ns, rng);
    Ok(RandomInstance { mdp, controllers: ControllerSet::tabular(ks)?, mu })
}

fn random_theta(m: usize, rng: &mut Rng) -> Vec<f64> {
    (0..m).map(|_| rng.random_range(-2.0..2.0)).collect()
}

fn random_pi(m: usize, rng: &mut Rng) -> Vec<f64> {
    dirichlet_row(m, rng)
}

/// Sizes of the lemma fuzz campaigns.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LemmaSuiteConfig {
    pub gradient_cases: usize,
    pub value_difference_cases: usize,
    /// Number of assumption-passing instances to check.
    pub lojasiewicz_cases: usize,
    /// Give up after this many draws.
    pub lojasiewicz_max_draws: usize,
    pub smoothness_cases: usize,
    pub smoothness_probes: usize,
    pub centering_cases: usize,
    pub dims: InstanceDims,
}

impl Default for LemmaSuiteConfig {
    fn default() -> Self {
        LemmaSuiteConfig {
            gradient_cases: 100,
            value_difference_cases: 100,
            lojasiewicz_cases: 200,
            lojasiewicz_max_draws: 4000,
            smoothness_cases: 100,
            smoothness_probes: 16,
            centering_cases: 100,
            dims: InstanceDims::default(),
        }
    }
}

const DISCOUNTS: [f64; 2] = [0.5, 0.9];

/// Gradient formula against central finite differences (`h = 1e-5`),
/// tolerance `1e-4` per coordinate.
pub fn gradient_report(cases: usize, dims: InstanceDims, rng: &mut Rng) -> Result<LemmaReport> {
    let mut rep = LemmaReport::new("gradient-vs-finite-difference");
    for _ in 0..cases {
        let inst = random_instance(dims, &DISCOUNTS, rng)?;
        let theta = random_theta(inst.controllers.len(), rng);
        let g = exact_value_gradient(&inst.mdp, &inst.controllers, &theta, &inst.mu)?;
        let fd = finite_difference_gradient(&inst.mdp, &inst.controllers, &theta, &inst.mu, 1e-5)?;
        let err = g.iter().zip(&fd).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        rep.observe(err - 1e-4, || inst.to_json(serde_json::json!({ "theta": theta })));
    }
    Ok(rep)
}

/// Both value-difference identities against direct evaluation, tolerance
/// `1e-9`.
pub fn value_difference_reports(cases: usize, dims: InstanceDims, rng: &mut Rng) -> Result<Vec<LemmaReport>> {
    let mut adv = LemmaReport::new("value-difference-advantage-form");
    let mut q = LemmaReport::new("value-difference-q-form");
    for _ in 0..cases {
        let inst = random_instance(dims, &DISCOUNTS, rng)?;
        let m = inst.controllers.len();
        let (pi, pi2) = (random_pi(m, rng), random_pi(m, rng));
        let s = rng.random_range(0..inst.mdp.n_states());
        let vd = check_value_difference(&inst.mdp, &inst.controllers, &pi, &pi2, s)?;
        let w = || inst.to_json(serde_json::json!({ "pi": pi, "pi_prime": pi2, "state": s }));
        adv.observe((vd.advantage_form - vd.direct).abs() - 1e-9, w);
        q.observe((vd.q_form - vd.direct).abs() - 1e-9, w);
    }
    Ok(vec![adv, q])
}

/// Gradient-domination inequality against brute-force optima.
pub fn lojasiewicz_report(cases: usize, max_draws: usize, dims: InstanceDims, rng: &mut Rng) -> Result<LemmaReport> {
    let mut rep = LemmaReport::new("lojasiewicz");
    let mut draws = 0;
    while rep.instances < cases && draws < max_draws {
        draws += 1;
        let inst = random_instance(dims, &DISCOUNTS, rng)?;
        let rho = inst.mdp.start_dist().to_vec();
        let (pi_star, _) = brute_force_optimal_mixture(&inst.mdp, &inst.controllers, &rho, None)?;
        let theta = random_theta(inst.controllers.len(), rng);
        match check_lojasiewicz(&inst.mdp, &inst.controllers, &theta, &pi_star, &rho, &inst.mu)? {
            LojasiewiczOutcome::Checked(c) => rep.observe(c.violation, || {
                inst.to_json(serde_json::json!({ "theta": theta, "pi_star": pi_star.to_vec(), "lhs": c.lhs, "rhs": c.rhs }))
            }),
            _ => rep.skipped += 1,
        }
    }
    if rep.instances < cases {
        // Too few instances satisfied the assumption: report it as a failure.
        rep.max_violation = rep.max_violation.max(0.0);
    }
    Ok(rep)
}

/// Second-difference probes against `(7γ²+4γ+5)/(2(1-γ)³)`.
pub fn smoothness_report(cases: usize, probes: usize, dims: InstanceDims, rng: &mut Rng) -> Result<LemmaReport> {
    let mut rep = LemmaReport::new("smoothness");
    for _ in 0..cases {
        let inst = random_instance(dims, &DISCOUNTS, rng)?;
        let theta = random_theta(inst.controllers.len(), rng);
        let bound = smoothness_bound(inst.mdp.discount());
        let c = check_smoothness(&inst.mdp, &inst.controllers, &theta, probes, bound, rng)?;
        rep.observe(c.violation, || inst.to_json(serde_json::json!({ "theta": theta, "second_difference": c.lhs })));
    }
    Ok(rep)
}

/// `Σ_m π(m) Ã(s, m) = 0` within `1e-10`.
pub fn centering_report(cases: usize, dims: InstanceDims, rng: &mut Rng) -> Result<LemmaReport> {
    let mut rep = LemmaReport::new("advantage-centering");
    for _ in 0..cases {
        let inst = random_instance(dims, &DISCOUNTS, rng)?;
        let pi = random_pi(inst.controllers.len(), rng);
        let c = advantage_centering(&inst.mdp, &inst.controllers, &pi)?;
        rep.observe(c - 1e-10, || inst.to_json(serde_json::json!({ "pi": pi })));
    }
    Ok(rep)
}

/// Reference values of the counterexample instances, tolerance `1e-12`
/// relative to the reward.
pub fn counterexample_report(reward: f64) -> Result<LemmaReport> {
    let mut rep = LemmaReport::new("counterexample-values");
    for ce in counterexample_mdps(reward)? {
        for ev in &ce.expected {
            let v = ce.mdp.evaluate_policy(&induced_policy(&ce.controllers, &ev.weights)?)?;
            let got = scalar_value(&v, &point_mass(ce.mdp.n_states(), ev.state))?;
            rep.observe((got - ev.value).abs() - 1e-12 * reward.abs().max(1.0), || {
                serde_json::json!({ "instance": ce.name, "label": ev.label, "expected": ev.value, "got": got })
            });
        }
    }
    Ok(rep)
}

/// Runs every lemma campaign.
pub fn run_lemma_suite(cfg: &LemmaSuiteConfig, rng: &mut Rng) -> Result<Vec<LemmaReport>> {
    let mut out = vec![gradient_report(cfg.gradient_cases, cfg.dims, rng)?];
    out.extend(value_difference_reports(cfg.value_difference_cases, cfg.dims, rng)?);
    out.push(lojasiewicz_report(cfg.lojasiewicz_cases, cfg.lojasiewicz_max_draws, cfg.dims, rng)?);
    out.push(smoothness_report(cfg.smoothness_cases, cfg.smoothness_probes, cfg.dims, rng)?);
    out.push(centering_report(cfg.centering_cases, cfg.dims, rng)?);
    out.push(counterexample_report(1.0)?);
    Ok(out)
}
