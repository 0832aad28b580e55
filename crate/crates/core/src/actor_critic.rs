//! Single-trajectory actor-critic over softmax mixtures.
//!
//! The critic fits `V_w(s) = φ(s)ᵀw` by batched semi-gradient TD(0) along
//! the controller-marginalized kernel `P̃(s'|s,m) = Σ_a K_m(s,a) P(s'|s,a)`.
//! The actor samples transitions from the restart kernel
//! `P̄ = γ P̃ + (1-γ) ρ`, whose stationary pairs realize the discounted
//! visitation measure, and ascends along TD-error-weighted scores, either
//! directly (AC) or preconditioned by the regularized empirical Fisher
//! matrix (NAC). One sample path is threaded through every critic and
//! actor batch.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::envs::queue::QueueState;
use crate::envs::Environment;
use crate::error::{ensure, Error, Result};
use crate::mdp::FiniteMdp;
use crate::mixture::{score_at, softmax, ControllerSet, MixtureWeights};
use crate::pg::norm;
use crate::rng::{stream, Rng, StreamRole};
use crate::trace::{fingerprint, should_record, AcStats, RunTrace, StepRecord};

/// Critic weights beyond this norm abort the run.
pub const DIVERGENCE_GUARD: f64 = 1e8;

/// Linear features `φ: S → R^d`.
pub trait FeatureMap<S: ?Sized>: Send + Sync {
    fn dim(&self) -> usize;

    /// Writes `φ(state)` into `out` (length [`FeatureMap::dim`]).
    fn features(&self, state: &S, out: &mut [f64]);
}

/// Indicator features for tabular states.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OneHotFeatures {
    pub n_states: usize,
}

impl FeatureMap<usize> for OneHotFeatures {
    fn dim(&self) -> usize {
        self.n_states
    }

    fn features(&self, state: &usize, out: &mut [f64]) {
        out.fill(0.0);
        out[*state] = 1.0;
    }
}

/// Queue lengths scaled by `cap·√N`, so `‖φ‖₂ ≤ 1` on every state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QueueFeatures {
    pub n_queues: usize,
    pub cap: u32,
}

impl FeatureMap<QueueState> for QueueFeatures {
    fn dim(&self) -> usize {
        self.n_queues
    }

    fn features(&self, state: &QueueState, out: &mut [f64]) {
        let scale = 1.0 / (f64::from(self.cap) * (self.n_queues as f64).sqrt());
        for (o, &q) in out.iter_mut().zip(state.iter()) {
            *o = f64::from(q) * scale;
        }
    }
}

/// Actor update rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AcMode {
    Ac,
    #[default]
    Nac,
}

impl std::str::FromStr for AcMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ac" => Ok(AcMode::Ac),
            "nac" => Ok(AcMode::Nac),
            other => Err(Error::Argument(format!("unknown actor-critic mode `{other}` (expected ac or nac)"))),
        }
    }
}

/// Hyperparameters of [`run_acil`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcilConfig {
    pub actor_step: f64,
    pub critic_step: f64,
    /// Fisher regularization `λ`.
    pub regularization: f64,
    pub actor_batch: usize,
    /// Transitions per critic batch (`H`).
    pub critic_inner: usize,
    /// Critic batches per actor step (`T_c`).
    pub critic_outer: usize,
    pub outer_steps: u64,
    pub mode: AcMode,
    pub discount: f64,
    pub seed: u64,
    /// Initial parameter; all ones when absent.
    #[serde(default)]
    pub init_theta: Option<Vec<f64>>,
    /// Start each critic call from the previous call's weights instead of
    /// zero.
    #[serde(default)]
    pub warm_start_critic: bool,
    #[serde(default = "one")]
    pub record_every: u64,
}

fn one() -> u64 {
    1
}

impl Default for AcilConfig {
    fn default() -> Self {
        AcilConfig {
            actor_step: 1e-4,
            critic_step: 1e-3,
            regularization: 0.1,
            actor_batch: 50,
            critic_inner: 30,
            critic_outer: 20,
            outer_steps: 1000,
            mode: AcMode::Nac,
            discount: 0.9,
            seed: 0,
            init_theta: None,
            warm_start_critic: false,
            record_every: 1,
        }
    }
}

impl AcilConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |x: f64| x > 0.0 && x.is_finite();
        ensure(positive(self.actor_step) && positive(self.critic_step), || "step sizes must be positive".into())?;
        ensure(self.mode == AcMode::Ac || positive(self.regularization), || {
            "NAC needs a positive regularization".into()
        })?;
        ensure(
            self.actor_batch >= 1 && self.critic_inner >= 1 && self.critic_outer >= 1 && self.outer_steps >= 1,
            || "batch sizes and step counts must be at least 1".into(),
        )?;
        ensure(self.discount > 0.0 && self.discount < 1.0, || "discount must lie in (0, 1)".into())?;
        Ok(())
    }
}

/// `r̃(s, m) = Σ_a K_m(s, a) r(s, a)` on a tabular MDP.
pub fn tilde_reward(mdp: &FiniteMdp, controllers: &ControllerSet, s: usize, m: usize) -> Result<f64> {
    let ks = controllers.matrices()?;
    ensure(m < ks.len() && s < mdp.n_states(), || format!("state {s} or controller {m} out of range"))?;
    Ok((0..mdp.n_actions()).map(|a| ks[m][(s, a)] * mdp.reward(s, a)).sum())
}

/// One sampled transition from controller `m` at `state`.
#[derive(Debug, Clone, PartialEq)]
pub struct BarSample<S> {
    pub next: S,
    /// Reward of the action drawn from `K_m`: an unbiased sample of
    /// `r̃(s, m)`.
    pub reward: f64,
    /// Whether the restart branch was taken.
    pub reset: bool,
}

/// Draws `s' ~ P̄(·|s, m)`: with probability `γ` a `P̃` step, otherwise a
/// fresh state from the environment's reset distribution. The reward is
/// sampled in both branches.
pub fn sample_bar_kernel<E: Environment>(
    env: &E,
    controllers: &ControllerSet<E::State>,
    state: &E::State,
    m: usize,
    discount: f64,
    rng: &mut Rng,
) -> Result<BarSample<E::State>> {
    let a = controllers.sample_action(m, state, rng);
    let mut next = state.clone();
    let reward = env.step(&mut next, a, rng)?;
    let u: f64 = rng.random();
    if u < discount {
        Ok(BarSample { next, reward, reset: false })
    } else {
        Ok(BarSample { next: env.reset(rng), reward, reset: true })
    }
}

/// `E_w = r̃ + (γ φ(s') - φ(s))ᵀ w`.
pub fn td_error(w: &[f64], phi_s: &[f64], phi_next: &[f64], discount: f64, reward: f64) -> Result<f64> {
    ensure(w.len() == phi_s.len() && w.len() == phi_next.len(), || {
        format!("critic has {} weights, features have {} and {}", w.len(), phi_s.len(), phi_next.len())
    })?;
    Ok(reward + w.iter().zip(phi_s.iter().zip(phi_next)).map(|(w, (a, b))| (discount * b - a) * w).sum::<f64>())
}

/// Result of a critic call.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticOutput<S> {
    pub w: Vec<f64>,
    /// Last state of the critic's trajectory.
    pub last_state: S,
    /// Mean TD error over the final batch.
    pub td_error_mean: f64,
}

/// Critic settings passed to [`critic_td`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CriticSchedule {
    pub step: f64,
    pub outer: usize,
    pub inner: usize,
    pub discount: f64,
}

/// Batched TD(0): `T_c` batches of `H` consecutive `P̃` transitions under
/// the fixed mixture `pi`, each followed by
/// `w ← w + (β/H) Σ E_w(s, m, s') φ(s)`. The path continues from `start`
/// and never resets.
#[allow(clippy::too_many_arguments)]
pub fn critic_td<E: Environment, F: FeatureMap<E::State> + ?Sized>(
    env: &E,
    controllers: &ControllerSet<E::State>,
    pi: &MixtureWeights,
    features: &F,
    schedule: CriticSchedule,
    start: E::State,
    w0: Vec<f64>,
    rng: &mut Rng,
) -> Result<CriticOutput<E::State>> {
    let d = features.dim();
    ensure(w0.len() == d, || format!("initial critic has {} weights for {d} features", w0.len()))?;
    let mut w = w0;
    let mut state = start;
    let (mut phi_s, mut phi_next, mut acc) = (vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    let mut td_mean = 0.0;
    for k in 0..schedule.outer {
        acc.fill(0.0);
        let mut td_sum = 0.0;
        for _ in 0..schedule.inner {
            features.features(&state, &mut phi_s);
            let m = if pi.len() == 1 { 0 } else { pi.sample(rng) };
            let a = controllers.sample_action(m, &state, rng);
            let r = env.step(&mut state, a, rng)?;
            features.features(&state, &mut phi_next);
            let e = td_error(&w, &phi_s, &phi_next, schedule.discount, r)?;
            td_sum += e;
            for (acc, p) in acc.iter_mut().zip(&phi_s) {
                *acc += e * p;
            }
        }
        let scale = schedule.step / schedule.inner as f64;
        for (w, a) in w.iter_mut().zip(&acc) {
            *w += scale * a;
        }
        let wn = norm(&w);
        if !(wn <= DIVERGENCE_GUARD) {
            return Err(Error::Numeric(format!("critic diverged at batch {k}: |w| = {wn:e}")));
        }
        td_mean = td_sum / schedule.inner as f64;
    }
    Ok(CriticOutput { w, last_state: state, td_error_mean: td_mean })
}

/// Solves `(F + λI) x = rhs` by Cholesky factorization.
pub fn fisher_regularized_solve(f: &DMatrix<f64>, lambda: f64, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    ensure(lambda > 0.0, || format!("regularization {lambda} must be positive"))?;
    ensure(f.is_square() && f.nrows() == rhs.len(), || "Fisher matrix and right-hand side disagree".into())?;
    let g = f + DMatrix::identity(f.nrows(), f.nrows()) * lambda;
    let chol = g
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numeric("regularized Fisher matrix is not positive definite".into()))?;
    let x = chol.solve(rhs);
    let resid = (&g * &x - rhs).norm();
    if !(resid <= 1e-10 * rhs.norm().max(1.0)) {
        return Err(Error::Numeric(format!("Fisher solve residual {resid:e}")));
    }
    Ok(x)
}

fn min_eigenvalue(f: &DMatrix<f64>) -> f64 {
    f.clone().symmetric_eigenvalues().iter().copied().fold(f64::INFINITY, f64::min)
}

/// Runs ACIL for `cfg.outer_steps` actor steps.
///
/// Each outer step `t` sets the environment clock to `t`, runs
/// [`critic_td`] from the current state, then draws an actor batch of `B`
/// transitions from `P̄` continuing from the critic's last state. The batch
/// yields `F = (1/B) Σ ψψᵀ` and `g = (α/B) Σ E ψ`; AC steps `θ += g`, NAC
/// steps `θ += (F + λI)⁻¹ g`. `F` is formed in both modes. Record `t` holds
/// `θ_t` before its update; `value` is the actor batch's mean reward divided
/// by `1 - γ`. The returned parameter `output_theta` is `θ_T̂` for `T̂`
/// uniform on `1..=T`.
pub fn run_acil<E: Environment, F: FeatureMap<E::State> + ?Sized>(
    env: &mut E,
    controllers: &ControllerSet<E::State>,
    features: &F,
    cfg: &AcilConfig,
) -> Result<RunTrace> {
    cfg.validate()?;
    let nm = controllers.len();
    let d = features.dim();
    let mut theta = match &cfg.init_theta {
        Some(t) => {
            ensure(t.len() == nm, || format!("initial theta has {} entries for {nm} controllers", t.len()))?;
            t.clone()
        }
        None => vec![1.0; nm],
    };
    let hash = fingerprint(&format!("acil|{}", serde_json::to_string(cfg).unwrap_or_default()));
    let mut trace = RunTrace::new(cfg.seed, hash, false);
    let mut learner = stream(cfg.seed, 0, StreamRole::Learner);
    let mut sim = stream(cfg.seed, 0, StreamRole::Environment);
    env.set_clock(0);
    let mut state = env.reset(&mut sim);
    let schedule = CriticSchedule {
        step: cfg.critic_step,
        outer: cfg.critic_outer,
        inner: cfg.critic_inner,
        discount: cfg.discount,
    };
    let mut w = vec![0.0; d];
    let mut history = Vec::with_capacity(cfg.outer_steps as usize);
    let (mut phi_s, mut phi_next) = (vec![0.0; d], vec![0.0; d]);
    let b = cfg.actor_batch as f64;
    for t in 1..=cfg.outer_steps {
        env.set_clock(t);
        let env_ref: &E = env;
        let pi = softmax(&theta)?;
        history.push(theta.clone());
        let w0 = if cfg.warm_start_critic { w.clone() } else { vec![0.0; d] };
        let critic = critic_td(env_ref, controllers, &pi, features, schedule, state, w0, &mut sim)
            .map_err(|e| Error::Numeric(format!("outer step {t}: {e}")))?;
        w = critic.w;
        state = critic.last_state;

        let mut fisher = DMatrix::<f64>::zeros(nm, nm);
        let mut g = DVector::<f64>::zeros(nm);
        let (mut td_sum, mut reward_sum) = (0.0, 0.0);
        for _ in 0..cfg.actor_batch {
            let m = if nm == 1 { 0 } else { pi.sample(&mut learner) };
            let sample = sample_bar_kernel(env_ref, controllers, &state, m, cfg.discount, &mut sim)
                .map_err(|e| Error::Numeric(format!("outer step {t}: {e}")))?;
            features.features(&state, &mut phi_s);
            features.features(&sample.next, &mut phi_next);
            let e = td_error(&w, &phi_s, &phi_next, cfg.discount, sample.reward)?;
            let psi = DVector::from_vec(score_at(&pi, m));
            fisher += &psi * psi.transpose() / b;
            g += &psi * e;
            td_sum += e;
            reward_sum += sample.reward;
            state = sample.next;
        }
        g *= cfg.actor_step / b;
        let asym = (&fisher - fisher.transpose()).abs().max();
        let fisher_min_eig = min_eigenvalue(&fisher);
        if asym > 1e-12 || fisher_min_eig < -1e-10 {
            return Err(Error::Numeric(format!(
                "outer step {t}: Fisher estimate not PSD (asymmetry {asym:e}, min eigenvalue {fisher_min_eig:e})"
            )));
        }
        let step = match cfg.mode {
            AcMode::Ac => g.clone(),
            AcMode::Nac => fisher_regularized_solve(&fisher, cfg.regularization, &g)?,
        };
        if should_record(t, cfg.outer_steps, cfg.record_every) {
            trace.records.push(StepRecord {
                step: t,
                pi: pi.to_vec(),
                value: reward_sum / b / (1.0 - cfg.discount),
                grad_norm: g.norm(),
                theta: theta.clone(),
                ac: Some(AcStats { w_norm: norm(&w), td_error_mean: td_sum / b, fisher_min_eig }),
                regret: None,
            });
        }
        for (th, s) in theta.iter_mut().zip(step.iter()) {
            *th += s;
        }
        if theta.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!("outer step {t}: actor parameter diverged")));
        }
    }
    let pick = learner.random_range(0..history.len());
    trace.output_theta = Some(history.swap_remove(pick));
    Ok(trace)
}
