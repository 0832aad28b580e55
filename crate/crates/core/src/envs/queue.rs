//! Discrete-time queueing networks with Bernoulli arrivals.
//!
//! Each slot the scheduler picks one action set (a group of queues it may
//! serve together), every nonempty queue in the set drains one packet, and
//! then fresh arrivals join: `Q_i(t+1) = (Q_i(t) - D_i(t))^+ + A_i(t+1)`.
//! Arrivals that would exceed the buffer cap are dropped.
//!
//! The per-slot reward is minus the backlog left after service, so it
//! charges every packet that could not be served this slot.

use std::sync::Arc;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::envs::Environment;
use crate::error::{arg, ensure, Error, Result};
use crate::mdp::FiniteMdp;
use crate::mixture::{Controller, ControllerSet, MixtureWeights, TabularController};
use crate::rng::Rng;

/// Largest buffer for which a tabular model may be built.
pub const MAX_TABULAR_CAP: u32 = 30;

/// Which groups of queues may be served in the same slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ServiceConstraint {
    /// A single server drains at most one packet per slot.
    SingleServer,
    /// Queues `i` and `i+1` interfere and cannot be served together.
    PathGraph,
}

/// How backlog is turned into reward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RewardMode {
    /// `-backlog / (n * cap)`, which lies in `[-1, 0]`.
    #[default]
    NormalizedBacklog,
    /// `-backlog` in packets.
    Backlog,
}

/// Arrival rates that take effect from a given learner step onward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateChange {
    pub at_step: u64,
    pub rates: Vec<f64>,
}

/// Parameters of a queueing network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueEnvConfig {
    pub arrival_rates: Vec<f64>,
    #[serde(default = "default_cap")]
    pub cap: u32,
    pub constraint: ServiceConstraint,
    /// Admissible action sets as 0-based queue indices, in action order.
    pub action_sets: Vec<Vec<usize>>,
    #[serde(default)]
    pub reward_mode: RewardMode,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub schedule: Vec<RateChange>,
}

fn default_cap() -> u32 {
    1000
}

impl QueueEnvConfig {
    /// Two queues behind one server; actions are idle, serve 1, serve 2.
    pub fn two_queue(rates: [f64; 2]) -> Self {
        QueueEnvConfig {
            arrival_rates: rates.to_vec(),
            cap: default_cap(),
            constraint: ServiceConstraint::SingleServer,
            action_sets: vec![vec![], vec![0], vec![1]],
            reward_mode: RewardMode::default(),
            schedule: Vec::new(),
        }
    }

    /// Path-graph interference network over `n` queues.
    ///
    /// For `n = 4` the actions are `∅, {1}, {2}, {3}, {4}, {1,3}, {2,4}, {1,4}`
    /// (1-based labels); other sizes list every independent set by size and
    /// then lexicographically.
    pub fn path_graph(n: usize, rate: f64) -> Self {
        QueueEnvConfig {
            arrival_rates: vec![rate; n],
            cap: default_cap(),
            constraint: ServiceConstraint::PathGraph,
            action_sets: path_graph_independent_sets(n),
            reward_mode: RewardMode::default(),
            schedule: Vec::new(),
        }
    }

    pub fn n_queues(&self) -> usize {
        self.arrival_rates.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_queues();
        ensure(n > 0, || "network needs at least one queue".into())?;
        ensure(self.cap >= 1, || "cap must be at least 1".into())?;
        check_rates(&self.arrival_rates, n)?;
        for c in &self.schedule {
            check_rates(&c.rates, n)?;
        }
        ensure(!self.action_sets.is_empty(), || "no action sets".into())?;
        for set in &self.action_sets {
            self.check_set(set)?;
        }
        Ok(())
    }

    /// Checks that `set` may be served in one slot.
    pub fn check_set(&self, set: &[usize]) -> Result<()> {
        let n = self.n_queues();
        if let Some(&q) = set.iter().find(|&&q| q >= n) {
            return arg(format!("queue {} does not exist", q + 1));
        }
        match self.constraint {
            ServiceConstraint::SingleServer => ensure(set.len() <= 1, || {
                format!("the server drains at most one packet per slot; asked to serve {set:?}")
            }),
            ServiceConstraint::PathGraph => {
                let mut sorted = set.to_vec();
                sorted.sort_unstable();
                for w in sorted.windows(2) {
                    ensure(w[1] > w[0] + 1, || {
                        format!("queues {} and {} interfere", w[0] + 1, w[1] + 1)
                    })?;
                }
                Ok(())
            }
        }
    }

    /// Arrival rates in force at learner step `clock`.
    pub fn rates_at(&self, clock: u64) -> &[f64] {
        self.schedule
            .iter()
            .filter(|c| c.at_step <= clock)
            .max_by_key(|c| c.at_step)
            .map_or(&self.arrival_rates, |c| &c.rates)
    }

    /// Action index serving exactly `set`, if admissible.
    pub fn action_of(&self, set: &[usize]) -> Option<usize> {
        let mut want = set.to_vec();
        want.sort_unstable();
        self.action_sets.iter().position(|s| {
            let mut have = s.clone();
            have.sort_unstable();
            have == want
        })
    }
}

fn check_rates(rates: &[f64], n: usize) -> Result<()> {
    ensure(rates.len() == n, || format!("{} rates for {n} queues", rates.len()))?;
    match rates.iter().find(|r| !(0.0..1.0).contains(*r)) {
        Some(r) => arg(format!("arrival rate {r} outside [0, 1)")),
        None => Ok(()),
    }
}

/// Independent sets of the path graph on `n` nodes (0-based).
pub fn path_graph_independent_sets(n: usize) -> Vec<Vec<usize>> {
    if n == 4 {
        return vec![vec![], vec![0], vec![1], vec![2], vec![3], vec![0, 2], vec![1, 3], vec![0, 3]];
    }
    let mut sets: Vec<Vec<usize>> = (0u32..(1 << n))
        .filter(|mask| mask & (mask >> 1) == 0)
        .map(|mask| (0..n).filter(|i| mask >> i & 1 == 1).collect())
        .collect();
    sets.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
    sets
}

/// Queue lengths.
pub type QueueState = Vec<u32>;

/// Simulator for a [`QueueEnvConfig`].
#[derive(Debug, Clone)]
pub struct QueueNetwork {
    cfg: Arc<QueueEnvConfig>,
    clock: u64,
}

impl QueueNetwork {
    pub fn new(cfg: QueueEnvConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(QueueNetwork { cfg: Arc::new(cfg), clock: 0 })
    }

    pub fn config(&self) -> &QueueEnvConfig {
        &self.cfg
    }

    pub fn n_queues(&self) -> usize {
        self.cfg.n_queues()
    }

    fn reward_of(&self, backlog: u64) -> f64 {
        match self.cfg.reward_mode {
            RewardMode::NormalizedBacklog => -(backlog as f64) / (self.n_queues() as f64 * self.cfg.cap as f64),
            RewardMode::Backlog => -(backlog as f64),
        }
    }

    /// Drains one packet from each nonempty queue in `set`; returns the
    /// reward for the remaining backlog. Rejects inadmissible sets.
    pub fn serve(&self, state: &mut QueueState, set: &[usize]) -> Result<f64> {
        self.cfg.check_set(set)?;
        Ok(self.serve_unchecked(state, set))
    }

    fn serve_unchecked(&self, state: &mut QueueState, set: &[usize]) -> f64 {
        for &q in set {
            state[q] = state[q].saturating_sub(1);
        }
        self.reward_of(state.iter().map(|&q| u64::from(q)).sum())
    }

    /// Adds the given arrival indicators, dropping packets above the cap.
    pub fn admit(&self, state: &mut QueueState, arrivals: &[bool]) {
        for (q, &a) in state.iter_mut().zip(arrivals) {
            if a && *q < self.cfg.cap {
                *q += 1;
            }
        }
    }

    fn arrive(&self, state: &mut QueueState, rng: &mut Rng) {
        let rates = self.cfg.rates_at(self.clock);
        for (q, &lam) in state.iter_mut().zip(rates) {
            let u: f64 = rng.random();
            if u < lam && *q < self.cfg.cap {
                *q += 1;
            }
        }
    }

    /// Exact tabular model on `[0, cap]^n` for small caps. States are
    /// enumerated in mixed radix with queue 1 as the least significant digit;
    /// the start distribution is the empty network.
    pub fn tabular_mdp(&self, discount: f64) -> Result<FiniteMdp> {
        let cap = self.cfg.cap;
        ensure(cap <= MAX_TABULAR_CAP, || {
            format!("tabular model needs cap <= {MAX_TABULAR_CAP}, got {cap}")
        })?;
        ensure(self.cfg.schedule.is_empty(), || "tabular model of a time-varying network".into())?;
        let n = self.n_queues();
        let radix = cap as usize + 1;
        let ns = radix.pow(n as u32);
        let sets = &self.cfg.action_sets;
        let rates = &self.cfg.arrival_rates;
        let mut transition = vec![vec![vec![0.0; ns]; sets.len()]; ns];
        let mut reward = vec![vec![0.0; sets.len()]; ns];
        for s in 0..ns {
            let q = decode_state(s, n, radix);
            for (a, set) in sets.iter().enumerate() {
                let mut post = q.clone();
                reward[s][a] = self.serve_unchecked(&mut post, set);
                for mask in 0u32..(1 << n) {
                    let mut prob = 1.0;
                    let mut next = post.clone();
                    for i in 0..n {
                        if mask >> i & 1 == 1 {
                            prob *= rates[i];
                            next[i] = (next[i] + 1).min(cap);
                        } else {
                            prob *= 1.0 - rates[i];
                        }
                    }
                    if prob > 0.0 {
                        transition[s][a][encode_state(&next, radix)] += prob;
                    }
                }
            }
        }
        let start = crate::mdp::point_mass(ns, 0);
        Ok(FiniteMdp::new(transition, reward, discount, start)?.with_costs_allowed(true))
    }
}

/// Mixed-radix index of a queue vector.
pub fn encode_state(q: &[u32], radix: usize) -> usize {
    q.iter().rev().fold(0, |acc, &x| acc * radix + x as usize)
}

/// Inverse of [`encode_state`].
pub fn decode_state(mut s: usize, n: usize, radix: usize) -> QueueState {
    (0..n)
        .map(|_| {
            let d = (s % radix) as u32;
            s /= radix;
            d
        })
        .collect()
}

impl Environment for QueueNetwork {
    type State = QueueState;

    fn reset(&self, _rng: &mut Rng) -> QueueState {
        vec![0; self.n_queues()]
    }

    fn step(&self, state: &mut QueueState, action: usize, rng: &mut Rng) -> Result<f64> {
        let set = self
            .cfg
            .action_sets
            .get(action)
            .ok_or_else(|| Error::Argument(format!("action {action} out of range")))?;
        let r = self.serve_unchecked(state, set);
        self.arrive(state, rng);
        Ok(r)
    }

    fn set_clock(&mut self, step: u64) {
        self.clock = step;
    }
}

/// Scheduling rules.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum QueueRule {
    /// Always serve queue `i` (0-based).
    ServeQueue(usize),
    /// Serve the longest queue.
    LongestQueueFirst,
    /// Serve the action set with the largest total backlog.
    MaxWeight,
    /// Serve the action set with the most nonempty queues.
    MaxEgressRate,
    /// Always serve this set.
    FixedSet(Vec<usize>),
}

/// A scheduling rule bound to a network's action list. Argmax ties go to the
/// lowest action index.
#[derive(Debug, Clone)]
pub struct QueueController {
    rule: QueueRule,
    sets: Arc<QueueEnvConfig>,
    fixed_action: Option<usize>,
}

impl QueueController {
    pub fn new(network: &QueueNetwork, rule: QueueRule) -> Result<Self> {
        let fixed_action = match &rule {
            QueueRule::ServeQueue(i) => Some(network.cfg.action_of(&[*i]).ok_or_else(|| {
                Error::Argument(format!("serving queue {} alone is not an action", i + 1))
            })?),
            QueueRule::FixedSet(set) => Some(network.cfg.action_of(set).ok_or_else(|| {
                Error::Argument(format!("set {set:?} is not an action of this network"))
            })?),
            _ => None,
        };
        Ok(QueueController { rule, sets: network.cfg.clone(), fixed_action })
    }

    pub fn rule(&self) -> &QueueRule {
        &self.rule
    }

    fn argmax_by(&self, weight: impl Fn(&[usize]) -> u64) -> usize {
        let mut best = 0;
        let mut best_w = None;
        for (i, set) in self.sets.action_sets.iter().enumerate() {
            let w = weight(set);
            if best_w.is_none_or(|b| w > b) {
                best = i;
                best_w = Some(w);
            }
        }
        best
    }

    /// Deterministic action for `state`.
    pub fn decide(&self, state: &[u32]) -> usize {
        if let Some(a) = self.fixed_action {
            return a;
        }
        match self.rule {
            QueueRule::MaxWeight => self.argmax_by(|s| s.iter().map(|&j| u64::from(state[j])).sum()),
            QueueRule::MaxEgressRate => self.argmax_by(|s| s.iter().filter(|&&j| state[j] > 0).count() as u64),
            QueueRule::LongestQueueFirst => {
                let longest = (0..state.len()).fold(0, |b, i| if state[i] > state[b] { i } else { b });
                if state[longest] == 0 {
                    return self.argmax_by(|s| s.iter().map(|&j| u64::from(state[j])).sum());
                }
                self.sets.action_of(&[longest]).unwrap_or_else(|| {
                    self.argmax_by(|s| s.iter().map(|&j| u64::from(state[j])).sum())
                })
            }
            QueueRule::ServeQueue(_) | QueueRule::FixedSet(_) => unreachable!("fixed rules resolved at construction"),
        }
    }

    /// The rule as a matrix over the tabular model's states.
    pub fn to_tabular(&self, network: &QueueNetwork) -> Result<TabularController> {
        let n = network.n_queues();
        let radix = network.cfg.cap as usize + 1;
        ensure(network.cfg.cap <= MAX_TABULAR_CAP, || "tabular controller needs a small cap".into())?;
        let ns = radix.pow(n as u32);
        let na = network.cfg.action_sets.len();
        let rows: Vec<Vec<f64>> = (0..ns)
            .map(|s| {
                let mut row = vec![0.0; na];
                row[self.decide(&decode_state(s, n, radix))] = 1.0;
                row
            })
            .collect();
        TabularController::from_rows(&rows, self.label())
    }
}

impl Controller<QueueState> for QueueController {
    fn sample_action(&self, state: &QueueState, _rng: &mut Rng) -> usize {
        self.decide(state)
    }

    fn label(&self) -> String {
        match &self.rule {
            QueueRule::ServeQueue(i) => format!("serve_queue_{}", i + 1),
            QueueRule::LongestQueueFirst => "lqf".into(),
            QueueRule::MaxWeight => "mw".into(),
            QueueRule::MaxEgressRate => "mer".into(),
            QueueRule::FixedSet(set) => format!(
                "fixed:{{{}}}",
                set.iter().map(|q| (q + 1).to_string()).collect::<Vec<_>>().join(",")
            ),
        }
    }
}

/// Parses a controller id: `serve_queue_<i>`, `lqf`, `mw`, `mer`,
/// `fixed:{i,j,...}` with 1-based queue labels.
pub fn parse_rule(id: &str) -> Result<QueueRule> {
    let id = id.trim();
    if let Some(i) = id.strip_prefix("serve_queue_") {
        let i: usize = i.parse().map_err(|_| Error::Argument(format!("bad queue index in {id:?}")))?;
        ensure(i >= 1, || "queue labels are 1-based".into())?;
        return Ok(QueueRule::ServeQueue(i - 1));
    }
    if let Some(body) = id.strip_prefix("fixed:") {
        let inner = body
            .trim()
            .strip_prefix('{')
            .and_then(|b| b.strip_suffix('}'))
            .ok_or_else(|| Error::Argument(format!("expected fixed:{{i,j}}, got {id:?}")))?;
        let set = inner
            .split(',')
            .filter(|t| !t.trim().is_empty())
            .map(|t| match t.trim().parse::<usize>() {
                Ok(q) if q >= 1 => Ok(q - 1),
                _ => arg(format!("bad queue label {t:?} in {id:?}")),
            })
            .collect::<Result<Vec<_>>>()?;
        return Ok(QueueRule::FixedSet(set));
    }
    match id {
        "lqf" => Ok(QueueRule::LongestQueueFirst),
        "mw" => Ok(QueueRule::MaxWeight),
        "mer" => Ok(QueueRule::MaxEgressRate),
        _ => arg(format!("unknown queue controller id {id:?}")),
    }
}

/// Builds a black-box controller set from ids.
pub fn controller_set(network: &QueueNetwork, ids: &[impl AsRef<str>]) -> Result<ControllerSet<QueueState>> {
    let members = ids
        .iter()
        .map(|id| {
            let c = QueueController::new(network, parse_rule(id.as_ref())?)?;
            Ok(Arc::new(c) as Arc<dyn Controller<QueueState>>)
        })
        .collect::<Result<Vec<_>>>()?;
    ControllerSet::black_box(members)
}

/// Tabular controller set over the network's small-cap model.
pub fn tabular_controller_set(network: &QueueNetwork, ids: &[impl AsRef<str>]) -> Result<ControllerSet> {
    let ks = ids
        .iter()
        .map(|id| QueueController::new(network, parse_rule(id.as_ref())?)?.to_tabular(network))
        .collect::<Result<Vec<_>>>()?;
    ControllerSet::tabular(ks)
}

/// Discounted return `Σ_{j=0}^{lt} γ^j r_j` of one episode from a reset
/// under mixture weights `pi`.
pub fn rollout_return<E: Environment>(
    env: &E,
    controllers: &ControllerSet<E::State>,
    pi: &MixtureWeights,
    rollout_len: usize,
    discount: f64,
    rng: &mut Rng,
) -> Result<f64> {
    let mut state = env.reset(rng);
    let mut ret = 0.0;
    let mut weight = 1.0;
    for _ in 0..=rollout_len {
        let m = if pi.len() == 1 { 0 } else { pi.sample(rng) };
        let a = controllers.sample_action(m, &state, rng);
        ret += weight * env.step(&mut state, a, rng)?;
        weight *= discount;
    }
    Ok(ret)
}

/// Mean and standard deviation of the discounted backlog, in packets, of a
/// controller run alone from an empty network for `rollout_len + 1` slots.
///
/// This is the delay figure of merit reported for the path-graph
/// controllers: the same truncated discounted cost the gradient estimator
/// sees, expressed in packet-slot units.
pub fn discounted_backlog(
    network: &QueueNetwork,
    controller: &QueueController,
    rollout_len: usize,
    discount: f64,
    rollouts: usize,
    rng: &mut Rng,
) -> Result<(f64, f64)> {
    ensure(rollouts >= 2, || "need at least two rollouts".into())?;
    let scale = match network.cfg.reward_mode {
        RewardMode::NormalizedBacklog => network.n_queues() as f64 * network.cfg.cap as f64,
        RewardMode::Backlog => 1.0,
    };
    let mut samples = Vec::with_capacity(rollouts);
    for _ in 0..rollouts {
        let mut state = network.reset(rng);
        let mut cost = 0.0;
        let mut weight = 1.0;
        for _ in 0..=rollout_len {
            let a = controller.decide(&state);
            cost -= weight * network.step(&mut state, a, rng)? * scale;
            weight *= discount;
        }
        samples.push(cost);
    }
    let mean = samples.iter().sum::<f64>() / rollouts as f64;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (rollouts as f64 - 1.0);
    Ok((mean, var.sqrt()))
}
