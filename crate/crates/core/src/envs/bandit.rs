//! Bandit-over-bandits: each base controller is a fixed distribution over
//! the arms of a Bernoulli bandit.

use rand::Rng as _;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::mdp::{check_distribution, FiniteMdp};
use crate::mixture::{sample_index, ControllerSet, TabularController};
use crate::rng::Rng;

/// Arm means, controllers over arms, and a discount.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BanditInstance {
    pub arm_means: Vec<f64>,
    /// `controllers[m][a]`: probability that controller `m` pulls arm `a`.
    pub controllers: Vec<Vec<f64>>,
    pub discount: f64,
}

impl BanditInstance {
    pub fn new(arm_means: Vec<f64>, controllers: Vec<Vec<f64>>, discount: f64) -> Result<Self> {
        let inst = BanditInstance { arm_means, controllers, discount };
        inst.validate()?;
        Ok(inst)
    }

    /// Instance whose controllers are the arms themselves.
    pub fn direct(arm_means: Vec<f64>, discount: f64) -> Result<Self> {
        let n = arm_means.len();
        let controllers = (0..n).map(|m| (0..n).map(|a| if a == m { 1.0 } else { 0.0 }).collect()).collect();
        Self::new(arm_means, controllers, discount)
    }

    pub fn validate(&self) -> Result<()> {
        ensure(!self.arm_means.is_empty(), || "bandit needs at least one arm".into())?;
        ensure(!self.controllers.is_empty(), || "bandit needs at least one controller".into())?;
        ensure(self.discount > 0.0 && self.discount < 1.0, || "discount must lie in (0, 1)".into())?;
        for (a, &mu) in self.arm_means.iter().enumerate() {
            ensure((0.0..=1.0).contains(&mu), || format!("arm {a} mean {mu} outside [0, 1]"))?;
        }
        for (m, row) in self.controllers.iter().enumerate() {
            ensure(row.len() == self.arm_means.len(), || format!("controller {m} has the wrong arity"))?;
            check_distribution(row, &format!("controller {m}"))?;
        }
        Ok(())
    }

    pub fn n_controllers(&self) -> usize {
        self.controllers.len()
    }

    /// `r_m = Σ_a K_m(a) μ_a`.
    pub fn controller_means(&self) -> Vec<f64> {
        self.controllers
            .iter()
            .map(|k| k.iter().zip(&self.arm_means).map(|(p, mu)| p * mu).sum())
            .collect()
    }

    /// Index of the best controller (lowest index on ties) and its mean.
    pub fn best(&self) -> (usize, f64) {
        let means = self.controller_means();
        let mut best = 0;
        for (m, &r) in means.iter().enumerate() {
            if r > means[best] {
                best = m;
            }
        }
        (best, means[best])
    }

    /// `Δ_m = r_{m*} - r_m`.
    pub fn gaps(&self) -> Vec<f64> {
        let (_, top) = self.best();
        self.controller_means().iter().map(|r| top - r).collect()
    }

    /// Smallest positive gap, or `None` when every controller is optimal.
    pub fn delta_min(&self) -> Option<f64> {
        let (best, _) = self.best();
        self.gaps()
            .into_iter()
            .enumerate()
            .filter(|&(m, _)| m != best)
            .map(|(_, g)| g)
            .min_by(f64::total_cmp)
    }

    /// Whether the best controller is unique.
    pub fn has_unique_optimum(&self) -> bool {
        self.delta_min().is_none_or(|d| d > 0.0)
    }

    /// Single-state MDP whose actions are the arms with reward `μ_a`, and
    /// the controllers as 1-row matrices over it.
    pub fn tabular_embedding(&self) -> Result<(FiniteMdp, ControllerSet)> {
        let na = self.arm_means.len();
        let mdp = FiniteMdp::new(vec![vec![vec![1.0]; na]], vec![self.arm_means.clone()], self.discount, vec![1.0])?;
        let ks = self
            .controllers
            .iter()
            .enumerate()
            .map(|(m, row)| TabularController::from_rows(std::slice::from_ref(row), format!("K{}", m + 1)))
            .collect::<Result<Vec<_>>>()?;
        Ok((mdp, ControllerSet::tabular(ks)?))
    }

    /// Random instance: arm means uniform on `[0, 1]`, controllers drawn
    /// from a flat Dirichlet, redrawn until the smallest gap is at least
    /// `min_gap`.
    pub fn random(n_controllers: usize, n_arms: usize, discount: f64, min_gap: f64, rng: &mut Rng) -> Result<Self> {
        ensure(n_controllers >= 1 && n_arms >= 1, || "need at least one controller and arm".into())?;
        let gamma = Gamma::new(1.0, 1.0).map_err(|e| Error::Argument(e.to_string()))?;
        for _ in 0..100_000 {
            let arm_means: Vec<f64> = (0..n_arms).map(|_| rng.random::<f64>()).collect();
            let controllers: Vec<Vec<f64>> = (0..n_controllers)
                .map(|_| {
                    let g: Vec<f64> = (0..n_arms).map(|_| gamma.sample(rng)).collect();
                    let z: f64 = g.iter().sum();
                    let mut row: Vec<f64> = g.iter().map(|x| x / z).collect();
                    // Absorb round-off so the row passes the 1e-12 sum check.
                    let err: f64 = 1.0 - row.iter().sum::<f64>();
                    row[0] += err;
                    row
                })
                .collect();
            let inst = BanditInstance { arm_means, controllers, discount };
            if inst.validate().is_ok() && inst.delta_min().is_none_or(|d| d >= min_gap) {
                return Ok(inst);
            }
        }
        Err(Error::Argument(format!("no instance with gap >= {min_gap} found")))
    }
}

/// Sampler for a bandit instance.
#[derive(Debug, Clone)]
pub struct BanditEnv {
    inst: BanditInstance,
}

impl BanditEnv {
    pub fn new(inst: BanditInstance) -> Result<Self> {
        inst.validate()?;
        Ok(BanditEnv { inst })
    }

    pub fn instance(&self) -> &BanditInstance {
        &self.inst
    }

    /// Plays `a ~ K_m` and returns a Bernoulli(`μ_a`) reward.
    pub fn pull(&self, m: usize, rng: &mut Rng) -> f64 {
        let a = sample_index(&self.inst.controllers[m], rng);
        let u: f64 = rng.random();
        if u < self.inst.arm_means[a] {
            1.0
        } else {
            0.0
        }
    }
}
