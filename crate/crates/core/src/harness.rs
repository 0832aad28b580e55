//! Experiment configuration, presets, trial orchestration and output files.
//!
//! An [`ExperimentConfig`] is a JSON document naming one learner and its
//! environment. [`run_experiment`] runs `trials` independent trials (in
//! parallel when `jobs > 1`), each with random streams derived from the
//! master seed and the trial index, and collects per-trial CSV traces, an
//! aggregate CSV, a JSON summary and, for the lemma suite, a lemma report.
//! Identical configurations produce byte-identical files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use nalgebra::Vector4;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::actor_critic::{run_acil, AcMode, AcilConfig, QueueFeatures};
use crate::diagnostics::{ct_series, lyapunov_bound, run_lemma_suite, LemmaReport, LemmaSuiteConfig};
use crate::envs::bandit::BanditInstance;
use crate::envs::chain::{chain_controllers, chain_mdp};
use crate::envs::counterexamples::{five_state_mdp, non_concavity_controllers, non_monotonicity_controllers, EPISODIC_DISCOUNT};
use crate::envs::epls::{
    draw_destabilizing_perturbation, fall_statistics, spectral_radius, CartpoleParams, Discretization, EplsSystem,
    DEFAULT_EULER_DT, REFERENCE_GAIN_EULER,
};
use crate::envs::queue::{controller_set, discounted_backlog, parse_rule, QueueController, QueueEnvConfig, QueueNetwork, RateChange, RewardMode};
use crate::error::{arg, ensure, Error, Result};
use crate::mdp::FiniteMdp;
use crate::mixture::{exact_value_gradient, ControllerSet};
use crate::pg::{
    run_bandit_pg_exact, run_bandit_projection_free, run_softmax_pg, run_spge, GradScale, PgConfig, SpsaConfig,
    DEFAULT_LEARNING_RATE,
};
use crate::rng::{seeded, stream, trial_seed, StreamRole};
use crate::trace::{fingerprint, fmt_f64, RunTrace};

/// Tabular problems for the exact-gradient learner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TabularSpec {
    Chain { discount: f64 },
    NonConcavity { reward: f64 },
    NonMonotonicity { reward: f64 },
    Explicit { mdp: FiniteMdp, controllers: Vec<Vec<Vec<f64>>> },
}

impl TabularSpec {
    pub fn build(&self) -> Result<(FiniteMdp, ControllerSet)> {
        match self {
            TabularSpec::Chain { discount } => Ok((chain_mdp(*discount)?, chain_controllers()?)),
            TabularSpec::NonConcavity { reward } => {
                Ok((five_state_mdp(*reward, EPISODIC_DISCOUNT)?, non_concavity_controllers()?))
            }
            TabularSpec::NonMonotonicity { reward } => {
                Ok((five_state_mdp(*reward, EPISODIC_DISCOUNT)?, non_monotonicity_controllers()?))
            }
            TabularSpec::Explicit { mdp, controllers } => Ok((mdp.clone(), ControllerSet::from_arrays(controllers)?)),
        }
    }
}

/// A fixed bandit instance or a recipe for drawing one per trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BanditSpec {
    Fixed { instance: BanditInstance },
    Random { controllers: usize, arms: usize, discount: f64, min_gap: f64 },
}

/// Standalone evaluation of every queue controller.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DelayTable {
    pub rollouts: usize,
    pub rollout_len: usize,
    pub discount: f64,
}

/// Balancing experiment on the cartpole with two perturbed gains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CartpoleFallConfig {
    pub params: CartpoleParams,
    pub discretization: Discretization,
    pub reference_gain: [f64; 4],
    /// Entry scale of the perturbation `Δ` applied as `K ± Δ`.
    pub delta_sd: f64,
    /// Both perturbed gains must have at least this spectral radius.
    pub min_radius: f64,
    pub max_draws: usize,
    /// Mixing probabilities of `(K + Δ, K - Δ)`.
    pub mixture: Vec<f64>,
    pub episodes: usize,
    pub horizon: usize,
    pub fall_threshold_deg: f64,
    pub init_scale: f64,
}

/// The learner and environment of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "algorithm", rename_all = "kebab-case")]
pub enum Experiment {
    SoftmaxPg {
        problem: TabularSpec,
        pg: PgConfig,
        /// Draw each initial `θ_m` uniformly from this interval.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        random_init: Option<[f64; 2]>,
    },
    Spge {
        network: QueueEnvConfig,
        controllers: Vec<String>,
        pg: PgConfig,
        spsa: SpsaConfig,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        delay_table: Option<DelayTable>,
    },
    BanditExact {
        bandit: BanditSpec,
        horizon: u64,
        record_every: u64,
    },
    BanditNoisy {
        bandit: BanditSpec,
        alpha: f64,
        horizon: u64,
        record_every: u64,
    },
    Acil {
        network: QueueEnvConfig,
        controllers: Vec<String>,
        acil: AcilConfig,
    },
    CartpoleFalls(CartpoleFallConfig),
    ValidateLemmas {
        suite: LemmaSuiteConfig,
    },
}

fn default_trials() -> usize {
    20
}

/// A complete, serializable experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub id: String,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
    /// Worker threads; one when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jobs: Option<usize>,
    /// Optimal mixture, when known, for running-minimum statistics.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimal_mixture: Option<Vec<f64>>,
    pub experiment: Experiment,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        ensure(self.trials >= 1, || "trials must be at least 1".into())?;
        ensure(self.jobs.is_none_or(|j| j >= 1), || "jobs must be at least 1".into())?;
        match &self.experiment {
            Experiment::SoftmaxPg { problem, pg, .. } => {
                pg.validate()?;
                problem.build().map(|_| ())
            }
            Experiment::Spge { network, controllers, pg, spsa, .. } => {
                pg.validate()?;
                spsa.validate()?;
                controller_set(&QueueNetwork::new(network.clone())?, controllers).map(|_| ())
            }
            Experiment::BanditExact { bandit, horizon, .. } | Experiment::BanditNoisy { bandit, horizon, .. } => {
                ensure(*horizon >= 1, || "horizon must be at least 1".into())?;
                if let BanditSpec::Fixed { instance } = bandit {
                    instance.validate()?;
                }
                Ok(())
            }
            Experiment::Acil { network, controllers, acil } => {
                acil.validate()?;
                controller_set(&QueueNetwork::new(network.clone())?, controllers).map(|_| ())
            }
            Experiment::CartpoleFalls(c) => {
                ensure(c.mixture.len() == 2, || "the fall experiment mixes exactly two gains".into())?;
                ensure(c.episodes >= 1 && c.horizon >= 1, || "episodes and horizon must be positive".into())?;
                Ok(())
            }
            Experiment::ValidateLemmas { .. } => Ok(()),
        }
    }

    /// Overrides the actor-critic mode; errors for other learners.
    pub fn set_ac_mode(&mut self, mode: AcMode) -> Result<()> {
        match &mut self.experiment {
            Experiment::Acil { acil, .. } => {
                acil.mode = mode;
                Ok(())
            }
            _ => arg(format!("experiment `{}` is not an actor-critic run", self.id)),
        }
    }

    /// Fingerprint of everything that affects results; the worker count
    /// does not.
    pub fn hash(&self) -> String {
        let canonical = ExperimentConfig { jobs: None, ..self.clone() };
        fingerprint(&serde_json::to_string(&canonical).unwrap_or_default())
    }
}

/// Identifiers accepted by [`preset`].
pub const PRESET_IDS: [&str; 11] = [
    "queue-equal-rates",
    "path-graph-5",
    "chain-pg",
    "bandit-exact",
    "bandit-noisy",
    "nacil-queues",
    "nacil-corner",
    "nacil-transition",
    "cartpole-epls",
    "validate-lemmas",
    "non-concavity-pg",
];

fn spsa_preset() -> SpsaConfig {
    SpsaConfig { grad_scale: GradScale::NormalizeTo(10.0), ..SpsaConfig::default() }
}

fn acil_preset(outer_steps: u64) -> AcilConfig {
    AcilConfig { actor_step: 1e-3, outer_steps, record_every: 100, ..AcilConfig::default() }
}

fn backlog_queues(rates: [f64; 2]) -> QueueEnvConfig {
    QueueEnvConfig { reward_mode: RewardMode::Backlog, ..QueueEnvConfig::two_queue(rates) }
}

/// Published settings of a named experiment.
pub fn preset(id: &str) -> Result<ExperimentConfig> {
    let base = |experiment, optimal: Option<Vec<f64>>| ExperimentConfig {
        id: id.to_string(),
        trials: default_trials(),
        seed: 0,
        jobs: None,
        optimal_mixture: optimal,
        experiment,
    };
    let pg = |eta: f64, horizon: u64, every: u64| PgConfig { record_every: every, ..PgConfig::new(eta, horizon, 0) };
    let serve2 = || vec!["serve_queue_1".to_string(), "serve_queue_2".to_string()];
    Ok(match id {
        "queue-equal-rates" => base(
            Experiment::Spge {
                network: QueueEnvConfig::two_queue([0.49, 0.49]),
                controllers: serve2(),
                pg: pg(DEFAULT_LEARNING_RATE, 10_000, 10),
                spsa: spsa_preset(),
                delay_table: None,
            },
            Some(vec![0.5, 0.5]),
        ),
        "path-graph-5" => base(
            Experiment::Spge {
                network: QueueEnvConfig::path_graph(4, 0.495),
                controllers: ["mw", "mer", "fixed:{1,3}", "fixed:{2,4}", "fixed:{1,4}"].map(String::from).to_vec(),
                pg: pg(DEFAULT_LEARNING_RATE, 20_000, 100),
                spsa: SpsaConfig { baseline_subtract: true, common_random_numbers: true, ..spsa_preset() },
                delay_table: Some(DelayTable { rollouts: 2000, rollout_len: 30, discount: 0.9 }),
            },
            Some(vec![0.0, 1.0, 0.0, 0.0, 0.0]),
        ),
        "chain-pg" => base(
            Experiment::SoftmaxPg {
                problem: TabularSpec::Chain { discount: 0.9 },
                pg: pg(1.0, 5000, 10),
                random_init: Some([0.5, 1.5]),
            },
            Some(vec![0.5, 0.5]),
        ),
        "non-concavity-pg" => base(
            Experiment::SoftmaxPg {
                problem: TabularSpec::NonConcavity { reward: 1.0 },
                pg: pg(1.0, 200, 1),
                random_init: None,
            },
            Some(vec![0.0, 1.0]),
        ),
        "bandit-exact" => base(
            Experiment::BanditExact {
                bandit: BanditSpec::Random { controllers: 5, arms: 10, discount: 0.9, min_gap: 0.1 },
                horizon: 10_000,
                record_every: 1,
            },
            None,
        ),
        "bandit-noisy" => base(
            Experiment::BanditNoisy {
                bandit: BanditSpec::Fixed { instance: BanditInstance::direct(vec![0.9, 0.5], 0.9)? },
                alpha: 0.5,
                horizon: 100_000,
                record_every: 100,
            },
            Some(vec![1.0, 0.0]),
        ),
        "nacil-queues" => base(
            Experiment::Acil { network: backlog_queues([0.4, 0.4]), controllers: serve2(), acil: acil_preset(20_000) },
            Some(vec![0.5, 0.5]),
        ),
        "nacil-corner" => base(
            Experiment::Acil {
                network: backlog_queues([0.35, 0.35]),
                controllers: vec!["serve_queue_1".into(), "serve_queue_2".into(), "lqf".into()],
                acil: acil_preset(20_000),
            },
            Some(vec![0.0, 0.0, 1.0]),
        ),
        "nacil-transition" => {
            let outer = 30_000u64;
            let mut network = backlog_queues([0.4, 0.3]);
            network.schedule = vec![RateChange { at_step: outer.div_ceil(3), rates: vec![0.3, 0.4] }];
            base(Experiment::Acil { network, controllers: serve2(), acil: acil_preset(outer) }, None)
        }
        "cartpole-epls" => base(
            Experiment::CartpoleFalls(CartpoleFallConfig {
                params: CartpoleParams::default(),
                discretization: Discretization::Euler { dt: DEFAULT_EULER_DT },
                reference_gain: REFERENCE_GAIN_EULER,
                delta_sd: 3.0,
                min_radius: 1.005,
                max_draws: 100_000,
                mixture: vec![0.53, 0.47],
                episodes: 100,
                horizon: 500,
                fall_threshold_deg: 12.0,
                init_scale: 0.05,
            }),
            None,
        ),
        "validate-lemmas" => {
            let mut c = base(Experiment::ValidateLemmas { suite: LemmaSuiteConfig::default() }, None);
            c.trials = 1;
            c
        }
        other => {
            return Err(Error::Argument(format!(
                "unknown experiment `{other}`; available presets: {}",
                PRESET_IDS.join(", ")
            )))
        }
    })
}

/// What one trial produced.
#[derive(Debug, Clone)]
pub struct TrialOutput {
    pub trace: Option<RunTrace>,
    pub csv: String,
    pub extra: Value,
}

/// Mean and population standard deviation of a series across trials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub steps: Vec<u64>,
    /// `pi_mean[k][m]` at record index `k`.
    pub pi_mean: Vec<Vec<f64>>,
    pub pi_std: Vec<Vec<f64>>,
    pub value_mean: Vec<f64>,
    pub value_std: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ct_mean: Option<Vec<f64>>,
}

fn mean_std(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = xs.clone().count() as f64;
    let mean = xs.clone().sum::<f64>() / n;
    let var = xs.map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl Aggregate {
    /// Aggregates traces aligned by record index (truncated to the
    /// shortest).
    pub fn from_traces(traces: &[&RunTrace], optimal: Option<&[f64]>) -> Result<Self> {
        ensure(!traces.is_empty(), || "no traces to aggregate".into())?;
        let len = traces.iter().map(|t| t.records.len()).min().unwrap_or(0);
        let m = traces[0].records.first().map_or(0, |r| r.pi.len());
        let mut agg = Aggregate {
            steps: traces[0].records[..len].iter().map(|r| r.step).collect(),
            pi_mean: Vec::with_capacity(len),
            pi_std: Vec::with_capacity(len),
            value_mean: Vec::with_capacity(len),
            value_std: Vec::with_capacity(len),
            ct_mean: None,
        };
        for k in 0..len {
            let (mut mu, mut sd) = (vec![0.0; m], vec![0.0; m]);
            for i in 0..m {
                (mu[i], sd[i]) = mean_std(traces.iter().map(move |t| t.records[k].pi[i]));
            }
            agg.pi_mean.push(mu);
            agg.pi_std.push(sd);
            let (vm, vs) = mean_std(traces.iter().map(|t| t.records[k].value));
            agg.value_mean.push(vm);
            agg.value_std.push(vs);
        }
        if let Some(opt) = optimal {
            let owned: Vec<RunTrace> = traces.iter().map(|t| (*t).clone()).collect();
            agg.ct_mean = Some(ct_series(&owned, opt)?.mean);
        }
        Ok(agg)
    }

    pub fn to_csv(&self) -> String {
        let m = self.pi_mean.first().map_or(0, Vec::len);
        let mut out = String::from("step");
        for i in 0..m {
            let _ = write!(out, ",pi_{i}_mean,pi_{i}_std");
        }
        out.push_str(",value_mean,value_std");
        if self.ct_mean.is_some() {
            out.push_str(",ct_mean");
        }
        out.push('\n');
        for k in 0..self.steps.len() {
            let _ = write!(out, "{}", self.steps[k]);
            for i in 0..m {
                let _ = write!(out, ",{},{}", fmt_f64(self.pi_mean[k][i]), fmt_f64(self.pi_std[k][i]));
            }
            let _ = write!(out, ",{},{}", fmt_f64(self.value_mean[k]), fmt_f64(self.value_std[k]));
            if let Some(ct) = &self.ct_mean {
                let _ = write!(out, ",{}", fmt_f64(ct[k]));
            }
            out.push('\n');
        }
        out
    }
}

/// Headline numbers of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub id: String,
    pub trials: usize,
    pub seed: u64,
    pub config_hash: String,
    /// `trial <k>: <reason>` for every failed or aborted trial.
    pub failures: Vec<String>,
    pub warnings: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_pi_mean: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_pi_std: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_value_mean: Option<f64>,
    /// Minimum over trials and steps of the weight on the optimal support.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ct_global_min: Option<f64>,
    pub extra: BTreeMap<String, Value>,
}

impl Summary {
    pub fn failed(&self) -> bool {
        !self.failures.is_empty()
    }
}

/// Everything [`run_experiment`] produced.
#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub summary: Summary,
    /// Per-trial results in trial order; `None` for failed trials.
    pub trials: Vec<Option<TrialOutput>>,
    pub aggregate: Option<Aggregate>,
    pub aggregate_csv: String,
    pub lemma_reports: Option<Vec<LemmaReport>>,
}

impl ExperimentOutcome {
    /// Whether the lemma suite (if run) found a violation.
    pub fn has_violation(&self) -> bool {
        self.lemma_reports.as_ref().is_some_and(|r| r.iter().any(|l| !l.passed()))
    }

    /// Writes `trial_<k>.csv`, `aggregate.csv`, `summary.json` and, for the
    /// lemma suite, `lemma_report.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (k, t) in self.trials.iter().enumerate() {
            if let Some(t) = t {
                std::fs::write(dir.join(format!("trial_{k}.csv")), &t.csv)?;
            }
        }
        std::fs::write(dir.join("aggregate.csv"), &self.aggregate_csv)?;
        std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&self.summary)? + "\n")?;
        if let Some(reports) = &self.lemma_reports {
            std::fs::write(dir.join("lemma_report.json"), serde_json::to_string_pretty(reports)? + "\n")?;
        }
        Ok(())
    }
}

fn run_trial(cfg: &ExperimentConfig, k: usize) -> Result<TrialOutput> {
    let seed = trial_seed(cfg.seed, k as u64);
    let trace_output = |trace: RunTrace| {
        let csv = trace.to_csv(k);
        TrialOutput { trace: Some(trace), csv, extra: Value::Null }
    };
    match &cfg.experiment {
        Experiment::SoftmaxPg { problem, pg, random_init } => {
            let (mdp, ks) = problem.build()?;
            let mut pg = pg.clone();
            pg.seed = seed;
            if let Some([lo, hi]) = random_init {
                let mut rng = stream(cfg.seed, k as u64, StreamRole::Instance);
                pg.init_theta = Some((0..ks.len()).map(|_| rng.random_range(*lo..=*hi)).collect());
            }
            Ok(trace_output(run_softmax_pg(&mdp, &ks, &pg)?))
        }
        Experiment::Spge { network, controllers, pg, spsa, .. } => {
            let mut env = QueueNetwork::new(network.clone())?;
            let ks = controller_set(&env, controllers)?;
            let pg = PgConfig { seed, ..pg.clone() };
            Ok(trace_output(run_spge(&mut env, &ks, &pg, spsa)?))
        }
        Experiment::BanditExact { bandit, horizon, record_every } => {
            let inst = bandit_instance(bandit, cfg.seed, k)?;
            let mut trace = run_bandit_pg_exact(&inst, *horizon, *record_every)?;
            trace.seed = seed;
            let v_star = inst.best().1 / (1.0 - inst.discount);
            Ok(TrialOutput { extra: json!({ "v_star": v_star, "instance": inst }), ..trace_output(trace) })
        }
        Experiment::BanditNoisy { bandit, alpha, horizon, record_every } => {
            let inst = bandit_instance(bandit, cfg.seed, k)?;
            let mut rng = stream(cfg.seed, k as u64, StreamRole::Learner);
            let mut trace = run_bandit_projection_free(&inst, *alpha, *horizon, *record_every, &mut rng)?;
            trace.seed = seed;
            Ok(TrialOutput { extra: json!({ "best": inst.best().0 }), ..trace_output(trace) })
        }
        Experiment::Acil { network, controllers, acil } => {
            let mut env = QueueNetwork::new(network.clone())?;
            let ks = controller_set(&env, controllers)?;
            let feats = QueueFeatures { n_queues: network.n_queues(), cap: network.cap };
            let acil = AcilConfig { seed, ..acil.clone() };
            let trace = run_acil(&mut env, &ks, &feats, &acil)?;
            let out_pi = trace.output_theta.as_deref().map(crate::mixture::softmax).transpose()?;
            Ok(TrialOutput { extra: json!({ "output_pi": out_pi.map(|p| p.to_vec()) }), ..trace_output(trace) })
        }
        Experiment::CartpoleFalls(c) => cartpole_trial(c, cfg.seed, k),
        Experiment::ValidateLemmas { suite } => {
            let mut rng = stream(cfg.seed, k as u64, StreamRole::Instance);
            let reports = run_lemma_suite(suite, &mut rng)?;
            let mut csv = String::from("lemma,instances,skipped,max_violation,passed\n");
            for r in &reports {
                let _ = writeln!(csv, "{},{},{},{},{}", r.lemma, r.instances, r.skipped, fmt_f64(r.max_violation), r.passed());
            }
            Ok(TrialOutput { trace: None, csv, extra: serde_json::to_value(&reports)? })
        }
    }
}

fn bandit_instance(spec: &BanditSpec, master: u64, k: usize) -> Result<BanditInstance> {
    match spec {
        BanditSpec::Fixed { instance } => Ok(instance.clone()),
        BanditSpec::Random { controllers, arms, discount, min_gap } => {
            let mut rng = stream(master, k as u64, StreamRole::Instance);
            BanditInstance::random(*controllers, *arms, *discount, *min_gap, &mut rng)
        }
    }
}

/// Per-policy outcome of one cartpole trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FallRow {
    pub policy: String,
    pub probs: Vec<f64>,
    pub lyapunov_bound: f64,
    pub mean_rounds: f64,
    pub fall_count: usize,
}

fn cartpole_trial(c: &CartpoleFallConfig, master: u64, k: usize) -> Result<TrialOutput> {
    let mut inst_rng = stream(master, k as u64, StreamRole::Instance);
    let reference = Vector4::from_column_slice(&c.reference_gain);
    let (delta, draws) = draw_destabilizing_perturbation(
        c.params,
        reference,
        c.discretization,
        c.delta_sd,
        c.min_radius,
        c.max_draws,
        &mut inst_rng,
    )?;
    let sys = EplsSystem::cartpole(c.params, vec![reference + delta, reference - delta], c.discretization);
    let threshold = c.fall_threshold_deg.to_radians();
    let mut rows = Vec::new();
    for (name, probs) in [("K1", vec![1.0, 0.0]), ("K2", vec![0.0, 1.0]), ("mixture", c.mixture.clone())] {
        let mut rng = stream(master, k as u64, StreamRole::Evaluation);
        let stats = fall_statistics(&sys, &probs, c.episodes, c.horizon, threshold, c.init_scale, &mut rng)?;
        rows.push(FallRow {
            policy: name.into(),
            lyapunov_bound: lyapunov_bound(&sys, &probs)?,
            probs,
            mean_rounds: stats.mean_rounds,
            fall_count: stats.fall_count,
        });
    }
    let mut csv = String::from("trial,policy,p_1,p_2,lyapunov_bound,mean_rounds,fall_count,episodes\n");
    for r in &rows {
        let _ = writeln!(
            csv,
            "{k},{},{},{},{},{},{},{}",
            r.policy,
            fmt_f64(r.probs[0]),
            fmt_f64(r.probs[1]),
            fmt_f64(r.lyapunov_bound),
            fmt_f64(r.mean_rounds),
            r.fall_count,
            c.episodes
        );
    }
    let radii: Vec<f64> = sys.closed_loops().iter().map(spectral_radius).collect();
    Ok(TrialOutput {
        trace: None,
        csv,
        extra: json!({ "rows": rows, "delta": delta.as_slice(), "draws": draws, "spectral_radii": radii }),
    })
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Unsupported(format!("thread pool: {e}")))
}

/// Runs every trial of `cfg` and assembles the outputs.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let jobs = cfg.jobs.unwrap_or(1);
    let results: Vec<Result<TrialOutput>> =
        pool(jobs)?.install(|| (0..cfg.trials).into_par_iter().map(|k| run_trial(cfg, k)).collect());
    let mut summary = Summary {
        id: cfg.id.clone(),
        trials: cfg.trials,
        seed: cfg.seed,
        config_hash: cfg.hash(),
        failures: Vec::new(),
        warnings: Vec::new(),
        final_pi_mean: None,
        final_pi_std: None,
        final_value_mean: None,
        ct_global_min: None,
        extra: BTreeMap::new(),
    };
    let mut trials = Vec::with_capacity(results.len());
    for (k, r) in results.into_iter().enumerate() {
        match r {
            Ok(t) => {
                if let Some(tr) = &t.trace {
                    if let Some(why) = &tr.aborted {
                        summary.failures.push(format!("trial {k}: aborted: {why}"));
                    }
                    for w in &tr.warnings {
                        let w = format!("trial {k}: {w}");
                        if !summary.warnings.contains(&w) {
                            summary.warnings.push(w);
                        }
                    }
                }
                trials.push(Some(t));
            }
            Err(e) => {
                summary.failures.push(format!("trial {k}: {e}"));
                trials.push(None);
            }
        }
    }
    let traces: Vec<&RunTrace> = trials.iter().flatten().filter_map(|t| t.trace.as_ref()).collect();
    let mut aggregate = None;
    let mut aggregate_csv = String::new();
    if !traces.is_empty() && traces.iter().all(|t| !t.records.is_empty()) {
        let agg = Aggregate::from_traces(&traces, cfg.optimal_mixture.as_deref())?;
        let finals: Vec<&[f64]> = traces.iter().filter_map(|t| t.final_pi()).collect();
        let m = finals[0].len();
        let stats: Vec<(f64, f64)> = (0..m).map(|i| mean_std(finals.iter().map(|p| p[i]))).collect();
        summary.final_pi_mean = Some(stats.iter().map(|s| s.0).collect());
        summary.final_pi_std = Some(stats.iter().map(|s| s.1).collect());
        summary.final_value_mean = Some(mean_std(traces.iter().filter_map(|t| t.last()).map(|r| r.value)).0);
        if let Some(opt) = &cfg.optimal_mixture {
            let owned: Vec<RunTrace> = traces.iter().map(|t| (*t).clone()).collect();
            summary.ct_global_min = Some(ct_series(&owned, opt)?.global_min);
        }
        aggregate_csv = agg.to_csv();
        aggregate = Some(agg);
    }
    let mut lemma_reports = None;
    match &cfg.experiment {
        Experiment::Spge { network, controllers, delay_table: Some(dt), .. } => {
            summary.extra.insert("mean_delay".into(), delay_table(network, controllers, dt, cfg.seed)?);
        }
        Experiment::Acil { .. } => {
            let outs: Vec<&Value> = trials.iter().flatten().map(|t| &t.extra["output_pi"]).collect();
            summary.extra.insert("output_pi".into(), json!(outs));
        }
        Experiment::BanditExact { .. } | Experiment::BanditNoisy { .. } => {
            let extras: Vec<&Value> = trials.iter().flatten().map(|t| &t.extra).collect();
            summary.extra.insert("instances".into(), json!(extras));
        }
        Experiment::CartpoleFalls(c) => {
            let (extra, csv) = cartpole_summary(&trials, c.episodes);
            summary.extra.extend(extra);
            aggregate_csv = csv;
        }
        Experiment::ValidateLemmas { .. } => {
            if let Some(Some(t)) = trials.first() {
                let reports: Vec<LemmaReport> = serde_json::from_value(t.extra.clone())?;
                aggregate_csv = t.csv.clone();
                summary.extra.insert("all_passed".into(), json!(reports.iter().all(LemmaReport::passed)));
                lemma_reports = Some(reports);
            }
        }
        _ => {}
    }
    Ok(ExperimentOutcome { summary, trials, aggregate, aggregate_csv, lemma_reports })
}

fn delay_table(network: &QueueEnvConfig, controllers: &[String], dt: &DelayTable, master: u64) -> Result<Value> {
    let net = QueueNetwork::new(network.clone())?;
    let mut out = serde_json::Map::new();
    for (i, id) in controllers.iter().enumerate() {
        let ctrl = QueueController::new(&net, parse_rule(id)?)?;
        let mut rng = stream(master, i as u64, StreamRole::Evaluation);
        let (mean, sd) = discounted_backlog(&net, &ctrl, dt.rollout_len, dt.discount, dt.rollouts, &mut rng)?;
        out.insert(id.clone(), json!({ "mean": mean, "sd": sd, "rollouts": dt.rollouts }));
    }
    Ok(Value::Object(out))
}

fn cartpole_summary(trials: &[Option<TrialOutput>], episodes: usize) -> (BTreeMap<String, Value>, String) {
    let rows: Vec<Vec<FallRow>> = trials
        .iter()
        .flatten()
        .filter_map(|t| serde_json::from_value(t.extra["rows"].clone()).ok())
        .collect();
    let mut extra = BTreeMap::new();
    let mut csv = String::from("policy,mean_fall_count,mean_rounds,mean_lyapunov_bound,episodes\n");
    if rows.is_empty() {
        return (extra, csv);
    }
    let n = rows.len() as f64;
    let mut means = serde_json::Map::new();
    for p in 0..rows[0].len() {
        let falls = rows.iter().map(|r| r[p].fall_count as f64).sum::<f64>() / n;
        let rounds = rows.iter().map(|r| r[p].mean_rounds).sum::<f64>() / n;
        let bound = rows.iter().map(|r| r[p].lyapunov_bound).sum::<f64>() / n;
        let name = rows[0][p].policy.clone();
        let _ = writeln!(csv, "{name},{},{},{},{episodes}", fmt_f64(falls), fmt_f64(rounds), fmt_f64(bound));
        means.insert(name, json!({ "mean_fall_count": falls, "mean_rounds": rounds, "mean_lyapunov_bound": bound }));
    }
    let strictly_best = rows
        .iter()
        .filter(|r| r[2].fall_count < r[0].fall_count.min(r[1].fall_count))
        .count();
    extra.insert("falls".into(), Value::Object(means));
    extra.insert("mixture_strictly_best_trials".into(), json!(strictly_best));
    (extra, csv)
}

/// One timing measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchEntry {
    pub name: String,
    pub iterations: usize,
    pub seconds: f64,
    pub micros_per_iteration: f64,
}

fn time<F: FnMut() -> Result<()>>(name: &str, iterations: usize, mut f: F) -> Result<BenchEntry> {
    let start = Instant::now();
    for _ in 0..iterations {
        f()?;
    }
    let seconds = start.elapsed().as_secs_f64();
    Ok(BenchEntry {
        name: name.into(),
        iterations,
        seconds,
        micros_per_iteration: seconds * 1e6 / iterations as f64,
    })
}

/// Times the inner loops of the main learners.
pub fn bench() -> Result<Vec<BenchEntry>> {
    let mdp = chain_mdp(0.9)?;
    let ks = chain_controllers()?;
    let mu = mdp.start_dist().to_vec();
    let mut out = vec![time("chain exact gradient", 2000, || {
        exact_value_gradient(&mdp, &ks, &[1.0, 0.5], &mu).map(|_| ())
    })?];
    let net = QueueNetwork::new(QueueEnvConfig::two_queue([0.49, 0.49]))?;
    let qks = controller_set(&net, &["serve_queue_1", "serve_queue_2"])?;
    let spsa = spsa_preset();
    let mut rng = seeded(0);
    let theta = [1.0, 1.0];
    out.push(time("two-queue gradient estimate", 200, || {
        crate::pg::grad_est(
            |w, r| crate::envs::queue::rollout_return(&net, &qks, w, spsa.rollout_len, spsa.discount, r),
            &theta,
            &spsa,
            &mut rng,
        )
        .map(|_| ())
    })?);
    let cfg = AcilConfig { outer_steps: 200, ..AcilConfig::default() };
    let feats = QueueFeatures { n_queues: 2, cap: 1000 };
    let mut env = net.clone();
    out.push(time("two-queue ACIL, 200 outer steps", 5, || run_acil(&mut env, &qks, &feats, &cfg).map(|_| ()))?);
    Ok(out)
}
