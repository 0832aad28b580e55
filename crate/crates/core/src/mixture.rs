//! Softmax mixtures over a fixed set of base controllers.
//!
//! A learner holds `θ ∈ R^M`; each round it samples controller `m` with
//! probability `softmax(θ)_m` and plays that controller's action. Over a
//! tabular MDP the mixture induces the flat policy `Σ_m π(m) K_m(s, ·)`,
//! which is what the exact-gradient and evaluation routines work with.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{arg, ensure, Error, Result};
use crate::mdp::{check_distribution, scalar_value, FiniteMdp, PolicyMatrix, ValueVector};
use crate::rng::Rng;

/// Mixture weights `π ∈ Δ^{M-1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MixtureWeights(Vec<f64>);

impl MixtureWeights {
    pub fn new(pi: Vec<f64>) -> Result<Self> {
        ensure(!pi.is_empty(), || "mixture over zero controllers".into())?;
        check_distribution(&pi, "mixture weights")?;
        Ok(MixtureWeights(pi))
    }

    /// Uniform weights over `m` controllers.
    pub fn uniform(m: usize) -> Self {
        MixtureWeights(vec![1.0 / m as f64; m])
    }

    /// All mass on controller `m` of `count`.
    pub fn vertex(count: usize, m: usize) -> Self {
        let mut pi = vec![0.0; count];
        pi[m] = 1.0;
        MixtureWeights(pi)
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// Samples a controller index.
    pub fn sample(&self, rng: &mut Rng) -> usize {
        sample_index(&self.0, rng)
    }
}

impl std::ops::Deref for MixtureWeights {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Draws an index from a probability vector by inversion.
pub fn sample_index(probs: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // u landed in the round-off gap above the cumulative sum.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

/// `π(m) = exp(θ_m - max θ) / Σ exp(θ_m' - max θ)`.
pub fn softmax(theta: &[f64]) -> Result<MixtureWeights> {
    ensure(!theta.is_empty(), || "softmax of an empty vector".into())?;
    if let Some(i) = theta.iter().position(|x| !x.is_finite()) {
        return Err(Error::Numeric(format!("theta[{i}] = {} is not finite", theta[i])));
    }
    let shift = theta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut pi: Vec<f64> = theta.iter().map(|&t| (t - shift).exp()).collect();
    let z: f64 = pi.iter().sum();
    for p in &mut pi {
        *p /= z;
    }
    Ok(MixtureWeights(pi))
}

/// Score function `∇_θ log π_θ(m) = e_m - softmax(θ)`.
pub fn score(theta: &[f64], m: usize) -> Result<Vec<f64>> {
    ensure(m < theta.len(), || format!("controller {m} out of range for M = {}", theta.len()))?;
    let pi = softmax(theta)?;
    Ok(score_at(&pi, m))
}

/// Score function for already computed weights.
pub fn score_at(pi: &[f64], m: usize) -> Vec<f64> {
    let mut psi: Vec<f64> = pi.iter().map(|p| -p).collect();
    psi[m] += 1.0;
    psi
}

/// A base controller seen as a black box: state in, action index out.
pub trait Controller<S: ?Sized>: Send + Sync {
    fn sample_action(&self, state: &S, rng: &mut Rng) -> usize;

    /// Short human-readable label used in traces.
    fn label(&self) -> String;
}

/// Controller given by a row-stochastic matrix `K[s][a]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularController {
    probs: DMatrix<f64>,
    label: String,
}

impl TabularController {
    pub fn new(probs: DMatrix<f64>, label: impl Into<String>) -> Result<Self> {
        PolicyMatrix::new(probs.clone())?;
        Ok(TabularController { probs, label: label.into() })
    }

    pub fn from_rows(rows: &[Vec<f64>], label: impl Into<String>) -> Result<Self> {
        let pm = PolicyMatrix::from_rows(rows)?;
        Ok(TabularController { probs: pm.matrix().clone(), label: label.into() })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.probs
    }
}

impl Controller<usize> for TabularController {
    fn sample_action(&self, state: &usize, rng: &mut Rng) -> usize {
        let u: f64 = rng.random();
        let na = self.probs.ncols();
        let mut acc = 0.0;
        for a in 0..na {
            acc += self.probs[(*state, a)];
            if u < acc {
                return a;
            }
        }
        (0..na).rev().find(|&a| self.probs[(*state, a)] > 0.0).unwrap_or(na - 1)
    }

    fn label(&self) -> String {
        self.label.clone()
    }
}

/// The `M` base controllers a mixture chooses among.
///
/// Built either from matrices, in which case exact evaluation and gradients
/// are available, or from black-box samplers.
#[derive(Clone)]
pub struct ControllerSet<S: ?Sized = usize> {
    members: Vec<Arc<dyn Controller<S>>>,
    tabular: Option<Vec<TabularController>>,
}

impl<S: ?Sized> std::fmt::Debug for ControllerSet<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ControllerSet")
            .field("labels", &self.labels())
            .field("tabular", &self.tabular.is_some())
            .finish()
    }
}

impl ControllerSet<usize> {
    /// Controllers with known matrices over a tabular state space.
    pub fn tabular(controllers: Vec<TabularController>) -> Result<Self> {
        ensure(!controllers.is_empty(), || "controller set must be nonempty".into())?;
        let (ns, na) = (controllers[0].probs.nrows(), controllers[0].probs.ncols());
        for (m, k) in controllers.iter().enumerate() {
            ensure(k.probs.nrows() == ns && k.probs.ncols() == na, || {
                format!("controller {m} has shape {:?}, expected ({ns}, {na})", k.probs.shape())
            })?;
        }
        let members = controllers
            .iter()
            .map(|k| Arc::new(k.clone()) as Arc<dyn Controller<usize>>)
            .collect();
        Ok(ControllerSet { members, tabular: Some(controllers) })
    }

    /// Controllers from nested `[m][s][a]` arrays.
    pub fn from_arrays(arrays: &[Vec<Vec<f64>>]) -> Result<Self> {
        let ks = arrays
            .iter()
            .enumerate()
            .map(|(m, rows)| TabularController::from_rows(rows, format!("K{}", m + 1)))
            .collect::<Result<Vec<_>>>()?;
        Self::tabular(ks)
    }

    pub fn to_json(&self) -> Result<String> {
        let ks = self.matrices()?;
        let doc = ControllerSetDocument {
            controllers: ks
                .iter()
                .map(|k| (0..k.nrows()).map(|s| k.row(s).iter().copied().collect()).collect())
                .collect(),
        };
        Ok(serde_json::to_string(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ControllerSetDocument = serde_json::from_str(text)?;
        Self::from_arrays(&doc.controllers)
    }
}

/// JSON layout of a tabular controller set: `controllers[m][s][a]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ControllerSetDocument {
    pub controllers: Vec<Vec<Vec<f64>>>,
}

impl<S: ?Sized> ControllerSet<S> {
    /// Controllers available only as samplers.
    pub fn black_box(members: Vec<Arc<dyn Controller<S>>>) -> Result<Self> {
        ensure(!members.is_empty(), || "controller set must be nonempty".into())?;
        Ok(ControllerSet { members, tabular: None })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn labels(&self) -> Vec<String> {
        self.members.iter().map(|c| c.label()).collect()
    }

    pub fn sample_action(&self, m: usize, state: &S, rng: &mut Rng) -> usize {
        self.members[m].sample_action(state, rng)
    }

    pub fn is_tabular(&self) -> bool {
        self.tabular.is_some()
    }

    /// Controller matrices, or an unsupported-operation error for black boxes.
    pub fn matrices(&self) -> Result<Vec<&DMatrix<f64>>> {
        match &self.tabular {
            Some(ks) => Ok(ks.iter().map(|k| &k.probs).collect()),
            None => Err(Error::Unsupported(
                "operation needs controller matrices; this set is black-box".into(),
            )),
        }
    }
}

/// Flat policy `π(a|s) = Σ_m π(m) K_m(s, a)`.
pub fn induced_policy(controllers: &ControllerSet, pi: &[f64]) -> Result<PolicyMatrix> {
    let ks = controllers.matrices()?;
    ensure(pi.len() == ks.len(), || {
        format!("{} weights for {} controllers", pi.len(), ks.len())
    })?;
    check_distribution(pi, "mixture weights")?;
    let mut out = DMatrix::zeros(ks[0].nrows(), ks[0].ncols());
    for (k, &w) in ks.iter().zip(pi) {
        out += *k * w;
    }
    Ok(PolicyMatrix::from_matrix_unchecked(out))
}

fn check_compatible(mdp: &FiniteMdp, controllers: &ControllerSet) -> Result<()> {
    let ks = controllers.matrices()?;
    ensure(ks[0].nrows() == mdp.n_states() && ks[0].ncols() == mdp.n_actions(), || {
        format!(
            "controllers are {:?}, MDP is ({}, {})",
            ks[0].shape(),
            mdp.n_states(),
            mdp.n_actions()
        )
    })
}

/// Controller-level action values and advantages under a mixture.
#[derive(Debug, Clone)]
pub struct TildeValues {
    /// `Q̃(s, m) = Σ_a K_m(s, a) Q(s, a)`, shape `S x M`.
    pub q: DMatrix<f64>,
    /// `Ã(s, m) = Q̃(s, m) - V(s)`.
    pub adv: DMatrix<f64>,
    pub v: ValueVector,
}

pub fn tilde_q_advantage(mdp: &FiniteMdp, controllers: &ControllerSet, pi: &[f64]) -> Result<TildeValues> {
    check_compatible(mdp, controllers)?;
    let policy = induced_policy(controllers, pi)?;
    let v = mdp.evaluate_policy(&policy)?;
    let q_sa = mdp.q_values(&v)?;
    let ks = controllers.matrices()?;
    let (ns, nm) = (mdp.n_states(), ks.len());
    let mut q = DMatrix::zeros(ns, nm);
    for (m, k) in ks.iter().enumerate() {
        for s in 0..ns {
            q[(s, m)] = k.row(s).dot(&q_sa.row(s));
        }
    }
    let mut adv = q.clone();
    for s in 0..ns {
        for m in 0..nm {
            adv[(s, m)] -= v[s];
        }
    }
    Ok(TildeValues { q, adv, v })
}

/// Exact gradient of `θ ↦ V^{π_θ}(μ)`:
/// `g(m) = (1/(1-γ)) Σ_s d_μ(s) π(m) Ã(s, m)`.
pub fn exact_value_gradient(
    mdp: &FiniteMdp,
    controllers: &ControllerSet,
    theta: &[f64],
    mu: &[f64],
) -> Result<Vec<f64>> {
    ensure(theta.len() == controllers.len(), || {
        format!("theta has {} entries for {} controllers", theta.len(), controllers.len())
    })?;
    let pi = softmax(theta)?;
    let tv = tilde_q_advantage(mdp, controllers, &pi)?;
    let policy = induced_policy(controllers, &pi)?;
    let d = mdp.visitation_measure(&policy, mu)?.d;
    let scale = 1.0 / (1.0 - mdp.discount());
    let grad = (0..pi.len())
        .map(|m| scale * pi[m] * (0..mdp.n_states()).map(|s| d[s] * tv.adv[(s, m)]).sum::<f64>())
        .collect::<Vec<_>>();
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numeric("gradient has non-finite entries".into()));
    }
    Ok(grad)
}

/// `V^{π}(dist)` for mixture weights `pi`, computed by evaluating the
/// induced flat policy.
pub fn mixture_value(mdp: &FiniteMdp, controllers: &ControllerSet, pi: &[f64], dist: &[f64]) -> Result<f64> {
    check_compatible(mdp, controllers)?;
    let policy = induced_policy(controllers, pi)?;
    scalar_value(&mdp.evaluate_policy(&policy)?, dist)
}

/// `V^{π_θ}(dist)` through softmax, induced policy and exact evaluation.
pub fn value_at_theta(mdp: &FiniteMdp, controllers: &ControllerSet, theta: &[f64], dist: &[f64]) -> Result<f64> {
    let pi = softmax(theta)?;
    mixture_value(mdp, controllers, &pi, dist)
}

/// Central finite-difference gradient of `θ ↦ V^{π_θ}(dist)`.
pub fn finite_difference_gradient(
    mdp: &FiniteMdp,
    controllers: &ControllerSet,
    theta: &[f64],
    dist: &[f64],
    h: f64,
) -> Result<Vec<f64>> {
    if h <= 0.0 {
        return arg(format!("finite-difference step {h} must be positive"));
    }
    let mut probe = theta.to_vec();
    (0..theta.len())
        .map(|m| {
            probe[m] = theta[m] + h;
            let up = value_at_theta(mdp, controllers, &probe, dist)?;
            probe[m] = theta[m] - h;
            let down = value_at_theta(mdp, controllers, &probe, dist)?;
            probe[m] = theta[m];
            Ok((up - down) / (2.0 * h))
        })
        .collect()
}
