//! Linearized cartpole under randomly switched linear feedback.
//!
//! Each step a gain `K_i` is drawn with probability `p_i` and the state moves
//! by `x(t+1) = A(i) x(t)` with `A(i) = A_open - b K_iᵀ` (optionally after an
//! explicit Euler step of length `dt`, plus Gaussian process noise).

use nalgebra::{Matrix4, Vector4};
use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::mdp::check_distribution;
use crate::mixture::sample_index;
use crate::rng::Rng;

/// Physical constants of the pendulum on a cart.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CartpoleParams {
    pub gravity: f64,
    pub pole_mass: f64,
    pub pole_length: f64,
    pub cart_mass: f64,
}

impl Default for CartpoleParams {
    fn default() -> Self {
        CartpoleParams { gravity: 9.8, pole_mass: 0.1, pole_length: 1.0, cart_mass: 1.0 }
    }
}

impl CartpoleParams {
    /// `l (4/3 - m_p / (m_p + m_k))`.
    fn effective_length(&self) -> f64 {
        self.pole_length * (4.0 / 3.0 - self.pole_mass / (self.pole_mass + self.cart_mass))
    }

    /// Open-loop matrix for the state `(x, ẋ, θ, θ̇)`.
    pub fn a_open(&self) -> Matrix4<f64> {
        let c = self.gravity / self.effective_length();
        Matrix4::new(
            0.0, 1.0, 0.0, 0.0, //
            0.0, 0.0, c, 0.0, //
            0.0, 0.0, 0.0, 1.0, //
            0.0, 0.0, c, 0.0,
        )
    }

    /// Input vector.
    pub fn b(&self) -> Vector4<f64> {
        Vector4::new(0.0, 1.0 / (self.pole_mass + self.cart_mass), 0.0, 1.0 / self.effective_length())
    }
}

/// How the linear model is turned into a one-step map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Discretization {
    /// Use `A_open - b Kᵀ` directly as the one-step map.
    Direct,
    /// `I + dt (A_open - b Kᵀ)`.
    Euler { dt: f64 },
}

/// Time step used when importing gains designed for continuous dynamics.
pub const DEFAULT_EULER_DT: f64 = 0.02;

/// LQR gain for the default cartpole under Euler steps of
/// [`DEFAULT_EULER_DT`], from the discrete algebraic Riccati equation with
/// `Q = I`, `R = 1`. Closed-loop spectral radius is about 0.9952.
pub const REFERENCE_GAIN_EULER: [f64; 4] = [-0.94078911, -5.17621886, 23.80960718, 13.4154401];

/// A switched linear system with rank-one feedback.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EplsSystem {
    pub a_open: Matrix4<f64>,
    pub b: Vector4<f64>,
    pub gains: Vec<Vector4<f64>>,
    pub discretization: Discretization,
    /// Standard deviation of IID Gaussian noise added to each coordinate.
    #[serde(default)]
    pub noise: f64,
}

impl EplsSystem {
    /// Cartpole with the given gains.
    pub fn cartpole(params: CartpoleParams, gains: Vec<Vector4<f64>>, discretization: Discretization) -> Self {
        EplsSystem { a_open: params.a_open(), b: params.b(), gains, discretization, noise: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        ensure(!self.gains.is_empty(), || "system needs at least one gain".into())?;
        ensure(self.noise >= 0.0 && self.noise.is_finite(), || "noise scale must be finite and >= 0".into())?;
        if let Discretization::Euler { dt } = self.discretization {
            ensure(dt > 0.0 && dt.is_finite(), || format!("Euler step {dt} must be positive"))?;
        }
        let finite = self.a_open.iter().chain(self.b.iter()).chain(self.gains.iter().flat_map(|k| k.iter()));
        for x in finite {
            if !x.is_finite() {
                return Err(Error::Numeric("system matrices must be finite".into()));
            }
        }
        Ok(())
    }

    /// One-step map under gain `i`, recomputed from the fields.
    pub fn closed_loop(&self, i: usize) -> Matrix4<f64> {
        let a = self.a_open - self.b * self.gains[i].transpose();
        match self.discretization {
            Discretization::Direct => a,
            Discretization::Euler { dt } => Matrix4::identity() + a * dt,
        }
    }

    pub fn closed_loops(&self) -> Vec<Matrix4<f64>> {
        (0..self.gains.len()).map(|i| self.closed_loop(i)).collect()
    }
}

/// Trajectory with the controller index used at each step.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// `states[0] = x0`, `states[t]` after `t` steps.
    pub states: Vec<Vector4<f64>>,
    pub controllers: Vec<usize>,
}

impl Trajectory {
    /// CSV dump with columns `t, x1..x4, controller` (the controller applied
    /// at step `t`; empty on the final state).
    pub fn to_csv(&self) -> String {
        use std::fmt::Write as _;
        let mut out = String::from("t,x1,x2,x3,x4,controller\n");
        for (t, x) in self.states.iter().enumerate() {
            let _ = write!(out, "{t}");
            for v in x.iter() {
                let _ = write!(out, ",{}", crate::trace::fmt_f64(*v));
            }
            match self.controllers.get(t) {
                Some(c) => {
                    let _ = writeln!(out, ",{c}");
                }
                None => out.push_str(",\n"),
            }
        }
        out
    }
}

fn check_probs(sys: &EplsSystem, probs: &[f64]) -> Result<()> {
    ensure(probs.len() == sys.gains.len(), || {
        format!("{} mixing probabilities for {} gains", probs.len(), sys.gains.len())
    })?;
    check_distribution(probs, "mixing probabilities")
}

/// Simulates `horizon` steps from `x0` with gains drawn IID from `probs`.
pub fn cartpole_epls(
    sys: &EplsSystem,
    probs: &[f64],
    horizon: usize,
    x0: Vector4<f64>,
    rng: &mut Rng,
) -> Result<Trajectory> {
    sys.validate()?;
    check_probs(sys, probs)?;
    let maps = sys.closed_loops();
    let mut states = Vec::with_capacity(horizon + 1);
    let mut controllers = Vec::with_capacity(horizon);
    if horizon == 0 {
        return Ok(Trajectory { states, controllers });
    }
    states.push(x0);
    let mut x = x0;
    for _ in 0..horizon {
        let i = if probs.len() == 1 { 0 } else { sample_index(probs, rng) };
        x = maps[i] * x;
        if sys.noise > 0.0 {
            for v in x.iter_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *v += sys.noise * z;
            }
        }
        controllers.push(i);
        states.push(x);
    }
    Ok(Trajectory { states, controllers })
}

/// Index of the pole angle in the state vector.
pub const ANGLE: usize = 2;

/// Outcome of repeated balancing trials.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FallStats {
    /// Mean of `min(first fall step, horizon)`.
    pub mean_rounds: f64,
    /// Trials whose pole fell before the horizon.
    pub fall_count: usize,
    pub trials: usize,
}

/// Runs `trials` episodes of length `horizon` from `x0 ~ U(-init_scale,
/// init_scale)^4`; a trial falls at the first step with
/// `|θ| > fall_threshold` (radians).
pub fn fall_statistics(
    sys: &EplsSystem,
    probs: &[f64],
    trials: usize,
    horizon: usize,
    fall_threshold: f64,
    init_scale: f64,
    rng: &mut Rng,
) -> Result<FallStats> {
    sys.validate()?;
    check_probs(sys, probs)?;
    ensure(fall_threshold > 0.0, || "fall threshold must be positive".into())?;
    let maps = sys.closed_loops();
    let noise = if sys.noise > 0.0 { Some(Normal::new(0.0, sys.noise).expect("finite sd")) } else { None };
    let mut total = 0usize;
    let mut falls = 0usize;
    for _ in 0..trials {
        let mut x = Vector4::from_fn(|_, _| rng.random_range(-init_scale..=init_scale));
        let mut fell_at = None;
        for t in 1..=horizon {
            let i = if probs.len() == 1 { 0 } else { sample_index(probs, rng) };
            x = maps[i] * x;
            if let Some(n) = &noise {
                for v in x.iter_mut() {
                    *v += n.sample(rng);
                }
            }
            if !(x[ANGLE].abs() <= fall_threshold) {
                fell_at = Some(t);
                break;
            }
        }
        match fell_at {
            Some(t) => {
                falls += 1;
                total += t;
            }
            None => total += horizon,
        }
    }
    Ok(FallStats { mean_rounds: total as f64 / trials.max(1) as f64, fall_count: falls, trials })
}

/// Spectral radius of a 4x4 matrix.
pub fn spectral_radius(m: &Matrix4<f64>) -> f64 {
    m.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Draws `Δ` with IID `N(0, delta_sd²)` entries until both `K ± Δ` have
/// closed-loop spectral radius at least `min_radius`. Returns `Δ` and the
/// number of draws used.
pub fn draw_destabilizing_perturbation(
    params: CartpoleParams,
    reference: Vector4<f64>,
    discretization: Discretization,
    delta_sd: f64,
    min_radius: f64,
    max_draws: usize,
    rng: &mut Rng,
) -> Result<(Vector4<f64>, usize)> {
    ensure(delta_sd > 0.0, || "perturbation scale must be positive".into())?;
    let normal = Normal::new(0.0, delta_sd).map_err(|e| Error::Argument(e.to_string()))?;
    for draw in 1..=max_draws {
        let delta = Vector4::from_fn(|_, _| normal.sample(rng));
        let sys = EplsSystem::cartpole(params, vec![reference + delta, reference - delta], discretization);
        if sys.closed_loops().iter().all(|a| spectral_radius(a) >= min_radius) {
            return Ok((delta, draw));
        }
    }
    Err(Error::Argument(format!(
        "no perturbation with scale {delta_sd} destabilized both gains within {max_draws} draws"
    )))
}
