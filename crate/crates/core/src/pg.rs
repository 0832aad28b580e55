//! Policy-gradient learners over softmax mixtures.
//!
//! * [`run_softmax_pg`]: gradient ascent with exact gradients on a tabular
//!   MDP.
//! * [`run_spge`]: the same ascent driven by the zeroth-order estimator
//!   [`grad_est`] on a black-box simulator.
//! * [`run_bandit_pg_exact`] and [`run_bandit_projection_free`]: the
//!   bandit-over-bandits learners.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::envs::bandit::{BanditEnv, BanditInstance};
use crate::envs::queue::rollout_return;
use crate::envs::{Environment, TabularEnv};
use crate::error::{ensure, Error, Result};
use crate::mdp::{check_distribution, FiniteMdp};
use crate::mixture::{exact_value_gradient, mixture_value, softmax, ControllerSet, MixtureWeights};
use crate::rng::{stream, Rng, StreamRole};
use crate::trace::{fingerprint, should_record, RunTrace, StepRecord};

/// Learning rate used by the sampled learners unless overridden.
pub const DEFAULT_LEARNING_RATE: f64 = 1e-4;

/// Step size `(1-γ)² / (7γ² + 4γ + 5)` under which exact-gradient ascent on
/// a tabular MDP with rewards in `[0, 1]` never decreases the value.
pub fn smoothness_step_size(discount: f64) -> f64 {
    let g = discount;
    (1.0 - g).powi(2) / (7.0 * g * g + 4.0 * g + 5.0)
}

/// Step size `2(1-γ)/5` of the exact bandit learner.
pub fn bandit_step_size(discount: f64) -> f64 {
    2.0 * (1.0 - discount) / 5.0
}

/// Settings shared by the gradient-ascent learners.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PgConfig {
    pub learning_rate: f64,
    pub horizon: u64,
    /// Initial parameter; all ones when absent.
    #[serde(default)]
    pub init_theta: Option<Vec<f64>>,
    pub seed: u64,
    /// Distribution the value is measured from; the MDP's start
    /// distribution when absent.
    #[serde(default)]
    pub start_dist: Option<Vec<f64>>,
    /// Keep every `record_every`-th step in the trace (first and last are
    /// always kept).
    #[serde(default = "one")]
    pub record_every: u64,
}

fn one() -> u64 {
    1
}

impl PgConfig {
    pub fn new(learning_rate: f64, horizon: u64, seed: u64) -> Self {
        PgConfig { learning_rate, horizon, init_theta: None, seed, start_dist: None, record_every: 1 }
    }

    pub fn validate(&self) -> Result<()> {
        ensure(self.learning_rate > 0.0 && self.learning_rate.is_finite(), || {
            format!("learning rate {} must be positive", self.learning_rate)
        })?;
        ensure(self.horizon >= 1, || "horizon must be at least 1".into())?;
        if let Some(theta) = &self.init_theta {
            ensure(theta.iter().all(|x| x.is_finite()), || "initial theta must be finite".into())?;
        }
        Ok(())
    }

    fn initial_theta(&self, m: usize) -> Result<Vec<f64>> {
        match &self.init_theta {
            Some(t) => {
                ensure(t.len() == m, || format!("initial theta has {} entries for {m} controllers", t.len()))?;
                Ok(t.clone())
            }
            None => Ok(vec![1.0; m]),
        }
    }

    fn hash(&self, extra: &str) -> String {
        fingerprint(&format!("{}|{extra}", serde_json::to_string(self).unwrap_or_default()))
    }
}

/// Optional rescaling applied to each gradient estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case", tag = "mode", content = "norm")]
pub enum GradScale {
    #[default]
    None,
    /// Rescale the estimate to the given Euclidean norm.
    NormalizeTo(f64),
}

impl GradScale {
    fn apply(self, g: &mut [f64]) {
        if let GradScale::NormalizeTo(target) = self {
            let n = norm(g);
            if n > 0.0 {
                g.iter_mut().for_each(|x| *x *= target / n);
            }
        }
    }
}

/// Settings of the sphere-perturbation gradient estimator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpsaConfig {
    /// Perturbation radius `α`.
    pub perturbation: f64,
    /// Number of random directions per estimate.
    pub runs: usize,
    /// Episodes averaged per direction.
    pub rollouts_per_run: usize,
    /// Rollouts sum rewards over steps `0..=rollout_len`.
    pub rollout_len: usize,
    /// Discount applied inside rollouts.
    pub discount: f64,
    #[serde(default)]
    pub grad_scale: GradScale,
    /// Subtract a return estimate at the unperturbed parameter from every
    /// direction's return.
    #[serde(default)]
    pub baseline_subtract: bool,
    /// Drive the perturbed and baseline rollouts of a direction from the
    /// same random stream (only meaningful with `baseline_subtract`).
    #[serde(default)]
    pub common_random_numbers: bool,
}

impl Default for SpsaConfig {
    fn default() -> Self {
        SpsaConfig {
            perturbation: 1.0 / 10f64.sqrt(),
            runs: 10,
            rollouts_per_run: 10,
            rollout_len: 30,
            discount: 0.9,
            grad_scale: GradScale::None,
            baseline_subtract: false,
            common_random_numbers: false,
        }
    }
}

impl SpsaConfig {
    pub fn validate(&self) -> Result<()> {
        ensure(self.perturbation > 0.0 && self.perturbation < 1.0, || {
            format!("perturbation {} must lie in (0, 1)", self.perturbation)
        })?;
        ensure(self.runs >= 1 && self.rollouts_per_run >= 1 && self.rollout_len >= 1, || {
            "runs, rollouts and rollout length must be at least 1".into()
        })?;
        ensure(self.discount > 0.0 && self.discount < 1.0, || "rollout discount must lie in (0, 1)".into())?;
        if let GradScale::NormalizeTo(n) = self.grad_scale {
            ensure(n > 0.0 && n.is_finite(), || "gradient norm target must be positive".into())?;
        }
        Ok(())
    }
}

/// A gradient estimate and the mean return observed while forming it.
#[derive(Debug, Clone, PartialEq)]
pub struct GradEstimate {
    pub gradient: Vec<f64>,
    /// Mean of the per-direction returns.
    pub mean_return: f64,
}

/// Uniform draw from the unit sphere in `R^m` (normalized Gaussian).
pub fn unit_sphere(m: usize, rng: &mut Rng) -> Vec<f64> {
    loop {
        let mut u: Vec<f64> = (0..m).map(|_| StandardNormal.sample(rng)).collect();
        let n = norm(&u);
        if n > 1e-150 {
            u.iter_mut().for_each(|x| *x /= n);
            return u;
        }
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Sphere-perturbation estimate of `∇_θ V`.
///
/// For each of `runs` directions `u` on the unit sphere the oracle is called
/// `rollouts_per_run` times at `softmax(θ + α u)`; the estimate is
/// `(1/runs) Σ mr·u·M/α` with `mr` the mean return of the direction (minus
/// the baseline return at `softmax(θ)` when `baseline_subtract` is set).
/// The oracle returns one sampled return for the given weights.
pub fn grad_est<F>(mut oracle: F, theta: &[f64], spsa: &SpsaConfig, rng: &mut Rng) -> Result<GradEstimate>
where
    F: FnMut(&MixtureWeights, &mut Rng) -> Result<f64>,
{
    spsa.validate()?;
    let m = theta.len();
    let scale = m as f64 / spsa.perturbation;
    let base_pi = softmax(theta)?;
    let mut mean_of = |pi: &MixtureWeights, rng: &mut Rng, run: usize| -> Result<f64> {
        let mut acc = 0.0;
        for k in 0..spsa.rollouts_per_run {
            acc += oracle(pi, rng).map_err(|e| annotate(e, &format!("run {run}, rollout {k}")))?;
        }
        Ok(acc / spsa.rollouts_per_run as f64)
    };
    let shared_baseline = if spsa.baseline_subtract && !spsa.common_random_numbers {
        Some(mean_of(&base_pi, rng, 0)?)
    } else {
        None
    };
    let mut grad = vec![0.0; m];
    let mut total = 0.0;
    let mut probe = vec![0.0; m];
    for run in 0..spsa.runs {
        let u = unit_sphere(m, rng);
        for i in 0..m {
            probe[i] = theta[i] + spsa.perturbation * u[i];
        }
        let pi = softmax(&probe)?;
        let mr = if spsa.baseline_subtract && spsa.common_random_numbers {
            let seed: u64 = rng.random();
            let mut a = crate::rng::seeded(seed);
            let mut b = crate::rng::seeded(seed);
            let up = mean_of(&pi, &mut a, run)?;
            let base = mean_of(&base_pi, &mut b, run)?;
            total += up;
            up - base
        } else {
            let up = mean_of(&pi, rng, run)?;
            total += up;
            up - shared_baseline.unwrap_or(0.0)
        };
        for i in 0..m {
            grad[i] += mr * u[i] * scale;
        }
    }
    grad.iter_mut().for_each(|g| *g /= spsa.runs as f64);
    Ok(GradEstimate { gradient: grad, mean_return: total / spsa.runs as f64 })
}

fn annotate(e: Error, context: &str) -> Error {
    match e {
        Error::Argument(s) => Error::Argument(format!("{context}: {s}")),
        Error::Numeric(s) => Error::Numeric(format!("{context}: {s}")),
        Error::Unsupported(s) => Error::Unsupported(format!("{context}: {s}")),
        other => other,
    }
}

fn check_start(mdp: &FiniteMdp, cfg: &PgConfig) -> Result<Vec<f64>> {
    match &cfg.start_dist {
        Some(mu) => {
            ensure(mu.len() == mdp.n_states(), || "start distribution has the wrong length".into())?;
            check_distribution(mu, "start distribution")?;
            Ok(mu.clone())
        }
        None => Ok(mdp.start_dist().to_vec()),
    }
}

/// Exact-gradient ascent `θ_{t+1} = θ_t + η ∇V^{π_θt}(μ)`.
///
/// Record `t` (1-based) holds `θ_t`, `π_t`, the exact value `V^{π_t}(μ)` and
/// the norm of the gradient taken there; `θ_1` is the initial parameter.
/// Each iteration also samples a controller, an action and a next state
/// from the MDP. That sampled path does not enter the update; it is kept
/// so the learner consumes randomness like its sampled counterparts.
pub fn run_softmax_pg(mdp: &FiniteMdp, controllers: &ControllerSet, cfg: &PgConfig) -> Result<RunTrace> {
    cfg.validate()?;
    if !mdp.allow_costs() {
        mdp.check_reward_range()?;
    }
    let mu = check_start(mdp, cfg)?;
    let mut theta = cfg.initial_theta(controllers.len())?;
    let mut trace = RunTrace::new(cfg.seed, cfg.hash("softmax-pg"), true);
    let mut rng = stream(cfg.seed, 0, StreamRole::Learner);
    let env = TabularEnv::with_reset_dist(mdp.clone(), mu.clone())?;
    let mut state = env.reset(&mut rng);
    for t in 1..=cfg.horizon {
        let pi = softmax(&theta)?;
        let grad = exact_value_gradient(mdp, controllers, &theta, &mu)
            .map_err(|e| annotate(e, &format!("step {t}")))?;
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!("step {t}: gradient entry {i} is not finite")));
        }
        if should_record(t, cfg.horizon, cfg.record_every) {
            let value = mixture_value(mdp, controllers, &pi, &mu)?;
            trace.records.push(StepRecord {
                step: t,
                pi: pi.to_vec(),
                value,
                grad_norm: norm(&grad),
                theta: theta.clone(),
                ac: None,
                regret: None,
            });
        }
        let m = pi.sample(&mut rng);
        let a = controllers.sample_action(m, &state, &mut rng);
        env.step(&mut state, a, &mut rng)?;
        for (th, g) in theta.iter_mut().zip(&grad) {
            *th += cfg.learning_rate * g;
        }
    }
    Ok(trace)
}

/// Zeroth-order ascent on a simulator.
///
/// Each iteration samples a controller from `π_t`, plays its action on a
/// persistent sample path, forms a [`grad_est`] estimate from fresh
/// rollouts of length `spsa.rollout_len` under the current environment
/// clock, optionally rescales it, and steps `θ += η ĝ`. The recorded value
/// is the mean rollout return seen by the estimator. If the simulator fails
/// the run stops and the trace so far is returned with `aborted` set.
pub fn run_spge<E: Environment>(
    env: &mut E,
    controllers: &ControllerSet<E::State>,
    cfg: &PgConfig,
    spsa: &SpsaConfig,
) -> Result<RunTrace> {
    cfg.validate()?;
    spsa.validate()?;
    let mut theta = cfg.initial_theta(controllers.len())?;
    let hash = cfg.hash(&serde_json::to_string(spsa).unwrap_or_default());
    let mut trace = RunTrace::new(cfg.seed, hash, false);
    let mut learner = stream(cfg.seed, 0, StreamRole::Learner);
    let mut sim = stream(cfg.seed, 0, StreamRole::Environment);
    env.set_clock(0);
    let mut state = env.reset(&mut sim);
    for t in 1..=cfg.horizon {
        env.set_clock(t);
        let pi = softmax(&theta)?;
        let m = pi.sample(&mut learner);
        let a = controllers.sample_action(m, &state, &mut learner);
        if let Err(e) = env.step(&mut state, a, &mut sim) {
            trace.aborted = Some(format!("step {t}: {e}"));
            return Ok(trace);
        }
        let env_ref: &E = env;
        let est = grad_est(
            |w, r| rollout_return(env_ref, controllers, w, spsa.rollout_len, spsa.discount, r),
            &theta,
            spsa,
            &mut sim,
        );
        let mut est = match est {
            Ok(e) => e,
            Err(e) => {
                trace.aborted = Some(format!("step {t}: {e}"));
                return Ok(trace);
            }
        };
        spsa.grad_scale.apply(&mut est.gradient);
        if should_record(t, cfg.horizon, cfg.record_every) {
            trace.records.push(StepRecord {
                step: t,
                pi: pi.to_vec(),
                value: est.mean_return,
                grad_norm: norm(&est.gradient),
                theta: theta.clone(),
                ac: None,
                regret: None,
            });
        }
        for (th, g) in theta.iter_mut().zip(&est.gradient) {
            *th += cfg.learning_rate * g;
        }
        if theta.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!("step {t}: parameter diverged")));
        }
    }
    Ok(trace)
}

/// `V = (1/(1-γ)) Σ_m π(m) r_m`.
pub fn bandit_value(inst: &BanditInstance, pi: &[f64]) -> Result<f64> {
    ensure(pi.len() == inst.n_controllers(), || {
        format!("{} weights for {} controllers", pi.len(), inst.n_controllers())
    })?;
    let r = inst.controller_means();
    Ok(pi.iter().zip(&r).map(|(p, r)| p * r).sum::<f64>() / (1.0 - inst.discount))
}

/// Exact bandit gradient `g(m) = π(m)(r_m - πᵀr)/(1-γ)`.
pub fn bandit_gradient(inst: &BanditInstance, pi: &[f64]) -> Vec<f64> {
    let r = inst.controller_means();
    let avg: f64 = pi.iter().zip(&r).map(|(p, r)| p * r).sum();
    pi.iter().zip(&r).map(|(p, r)| p * (r - avg) / (1.0 - inst.discount)).collect()
}

fn tie_warning(inst: &BanditInstance) -> Option<String> {
    (!inst.has_unique_optimum()).then(|| "best controller is not unique; rate guarantees assume a positive gap".into())
}

/// Softmax ascent with exact bandit gradients and step `2(1-γ)/5` from the
/// uniform mixture. Records carry the cumulative regret
/// `Σ_{s≤t} (V* - V_s)`.
pub fn run_bandit_pg_exact(inst: &BanditInstance, horizon: u64, record_every: u64) -> Result<RunTrace> {
    inst.validate()?;
    ensure(horizon >= 1, || "horizon must be at least 1".into())?;
    let m = inst.n_controllers();
    let eta = bandit_step_size(inst.discount);
    let v_star = inst.best().1 / (1.0 - inst.discount);
    let mut trace = RunTrace::new(0, fingerprint(&format!("bandit-exact|{horizon}|{inst:?}")), true);
    trace.warnings.extend(tie_warning(inst));
    let mut theta = vec![0.0; m];
    let mut regret = 0.0;
    for t in 1..=horizon {
        let pi = softmax(&theta)?;
        let value = bandit_value(inst, &pi)?;
        regret += v_star - value;
        let grad = bandit_gradient(inst, &pi);
        if should_record(t, horizon, record_every) {
            trace.records.push(StepRecord {
                step: t,
                pi: pi.to_vec(),
                value,
                grad_norm: norm(&grad),
                theta: theta.clone(),
                ac: None,
                regret: Some(regret),
            });
        }
        for (th, g) in theta.iter_mut().zip(&grad) {
            *th += eta * g;
        }
    }
    Ok(trace)
}

/// Largest `α` covered by the noisy-gradient convergence guarantee:
/// `Δ_min / (r_{m*} - Δ_min)`.
pub fn projection_free_alpha_limit(inst: &BanditInstance) -> Option<f64> {
    let d = inst.delta_min()?;
    let top = inst.best().1;
    (top - d > 0.0).then(|| d / (top - d))
}

/// Index of the largest entry, lowest index on ties.
pub fn leader(pi: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in pi.iter().enumerate() {
        if p > pi[best] {
            best = i;
        }
    }
    best
}

/// One projection-free update for the played controller `played` with
/// reward `reward`. Non-leading coordinates move by
/// `α π(m)² (R 1[m played]/π(m) - R 1[leader played]/π(leader))`; the
/// leader absorbs the remainder so the weights keep summing to one.
pub fn projection_free_step(pi: &mut [f64], played: usize, reward: f64, alpha: f64) {
    let lead = leader(pi);
    let lead_term = if played == lead { reward / pi[lead] } else { 0.0 };
    let mut rest = 0.0;
    for (m, p) in pi.iter_mut().enumerate() {
        if m == lead {
            continue;
        }
        let own = if played == m { reward / *p } else { 0.0 };
        *p += alpha * *p * *p * (own - lead_term);
        rest += *p;
    }
    pi[lead] = 1.0 - rest;
}

/// Projection-free learner on sampled Bernoulli rewards, from the uniform
/// mixture. Panics if the iterate ever leaves the simplex.
pub fn run_bandit_projection_free(
    inst: &BanditInstance,
    alpha: f64,
    horizon: u64,
    record_every: u64,
    rng: &mut Rng,
) -> Result<RunTrace> {
    inst.validate()?;
    ensure(alpha > 0.0 && alpha <= 1.0, || format!("step parameter {alpha} must lie in (0, 1]"))?;
    let env = BanditEnv::new(inst.clone())?;
    let m = inst.n_controllers();
    let v_star = inst.best().1 / (1.0 - inst.discount);
    let mut trace = RunTrace::new(0, fingerprint(&format!("bandit-pf|{alpha}|{horizon}|{inst:?}")), true);
    trace.warnings.extend(tie_warning(inst));
    match projection_free_alpha_limit(inst) {
        Some(limit) if alpha < limit => {}
        Some(limit) => trace.warnings.push(format!("alpha {alpha} is not below the guarantee limit {limit}")),
        None => {}
    }
    let mut pi = vec![1.0 / m as f64; m];
    let mut regret = 0.0;
    for t in 1..=horizon {
        let value = bandit_value(inst, &pi)?;
        regret += v_star - value;
        if should_record(t, horizon, record_every) {
            trace.records.push(StepRecord {
                step: t,
                pi: pi.clone(),
                value,
                grad_norm: 0.0,
                theta: Vec::new(),
                ac: None,
                regret: Some(regret),
            });
        }
        let played = crate::mixture::sample_index(&pi, rng);
        let reward = env.pull(played, rng);
        projection_free_step(&mut pi, played, reward, alpha);
        let sum: f64 = pi.iter().sum();
        assert!(
            pi.iter().all(|&p| p >= 0.0) && (sum - 1.0).abs() <= 1e-12,
            "projection-free iterate left the simplex at step {t}: {pi:?}"
        );
    }
    Ok(trace)
}
