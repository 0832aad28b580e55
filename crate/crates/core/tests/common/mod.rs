//! Instance generators and reference computations shared by the test
//! targets. The oracles here avoid the library's solvers so they can check
//! them.

#![allow(dead_code)]

use improper::mdp::FiniteMdp;
use improper::mixture::ControllerSet;
use improper::rng::Rng;
use rand::Rng as _;

/// Random probability vector with every entry at least `floor / n`.
pub fn random_dist(n: usize, floor: f64, rng: &mut Rng) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + floor).collect();
    let z: f64 = raw.iter().sum();
    let mut d: Vec<f64> = raw.iter().map(|x| x / z).collect();
    let err = 1.0 - d.iter().sum::<f64>();
    d[0] += err;
    d
}

pub fn random_mdp(ns: usize, na: usize, discount: f64, rng: &mut Rng) -> FiniteMdp {
    let transition = (0..ns).map(|_| (0..na).map(|_| random_dist(ns, 0.05, rng)).collect()).collect();
    let reward = (0..ns).map(|_| (0..na).map(|_| rng.random::<f64>()).collect()).collect();
    let start = random_dist(ns, 0.05, rng);
    FiniteMdp::new(transition, reward, discount, start).expect("valid random MDP")
}

/// Controllers as `[m][s][a]` arrays.
pub fn random_controller_arrays(nm: usize, ns: usize, na: usize, rng: &mut Rng) -> Vec<Vec<Vec<f64>>> {
    (0..nm).map(|_| (0..ns).map(|_| random_dist(na, 0.05, rng)).collect()).collect()
}

pub fn random_controllers(nm: usize, ns: usize, na: usize, rng: &mut Rng) -> ControllerSet {
    ControllerSet::from_arrays(&random_controller_arrays(nm, ns, na, rng)).expect("valid controllers")
}

/// Flat policy `Σ_m w_m K_m` built by hand.
pub fn mix_by_hand(ks: &ControllerSet, w: &[f64], ns: usize, na: usize) -> Vec<Vec<f64>> {
    let mats = ks.matrices().expect("tabular");
    (0..ns)
        .map(|s| (0..na).map(|a| mats.iter().zip(w).map(|(k, p)| p * k[(s, a)]).sum()).collect())
        .collect()
}

/// Value of a flat policy by repeated Bellman backups to a fixed point.
pub fn iterate_value(mdp: &FiniteMdp, policy: &[Vec<f64>]) -> Vec<f64> {
    let (ns, na, g) = (mdp.n_states(), mdp.n_actions(), mdp.discount());
    let mut v = vec![0.0; ns];
    loop {
        let next: Vec<f64> = (0..ns)
            .map(|s| {
                (0..na)
                    .map(|a| {
                        let cont: f64 = mdp.next_dist(s, a).iter().zip(&v).map(|(p, x)| p * x).sum();
                        policy[s][a] * (mdp.reward(s, a) + g * cont)
                    })
                    .sum()
            })
            .collect();
        let delta = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = next;
        if delta < 1e-14 {
            return v;
        }
    }
}

/// Naive softmax without the max shift; fine for moderate inputs.
pub fn naive_softmax(theta: &[f64]) -> Vec<f64> {
    let e: Vec<f64> = theta.iter().map(|t| t.exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

/// `V^{softmax(θ)}(dist)` through [`iterate_value`].
pub fn oracle_value_at_theta(mdp: &FiniteMdp, ks: &ControllerSet, theta: &[f64], dist: &[f64]) -> f64 {
    let w = naive_softmax(theta);
    let policy = mix_by_hand(ks, &w, mdp.n_states(), mdp.n_actions());
    iterate_value(mdp, &policy).iter().zip(dist).map(|(v, p)| v * p).sum()
}

/// Central finite differences of [`oracle_value_at_theta`].
pub fn oracle_gradient(mdp: &FiniteMdp, ks: &ControllerSet, theta: &[f64], dist: &[f64], h: f64) -> Vec<f64> {
    (0..theta.len())
        .map(|m| {
            let (mut up, mut down) = (theta.to_vec(), theta.to_vec());
            up[m] += h;
            down[m] -= h;
            (oracle_value_at_theta(mdp, ks, &up, dist) - oracle_value_at_theta(mdp, ks, &down, dist)) / (2.0 * h)
        })
        .collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
