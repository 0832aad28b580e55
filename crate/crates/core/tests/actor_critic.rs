mod common;

use common::{random_controllers, random_mdp};
use improper::actor_critic::{
    critic_td, fisher_regularized_solve, run_acil, sample_bar_kernel, td_error, tilde_reward, AcMode, AcilConfig,
    CriticSchedule, FeatureMap, OneHotFeatures, QueueFeatures,
};
use improper::envs::counterexamples::{five_state_mdp, non_concavity_controllers, EPISODIC_DISCOUNT};
use improper::envs::queue::QueueState;
use improper::envs::TabularEnv;
use improper::mdp::FiniteMdp;
use improper::mixture::{ControllerSet, MixtureWeights};
use improper::rng::seeded;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

/// Deterministic two-state cycle paying 1 in state 0 and 0 in state 1.
fn two_cycle(discount: f64) -> (TabularEnv, ControllerSet) {
    let mdp = FiniteMdp::new(
        vec![vec![vec![0.0, 1.0]], vec![vec![1.0, 0.0]]],
        vec![vec![1.0], vec![0.0]],
        discount,
        vec![1.0, 0.0],
    )
    .unwrap();
    let ks = ControllerSet::from_arrays(&[vec![vec![1.0], vec![1.0]]]).unwrap();
    (TabularEnv::new(mdp), ks)
}

#[test]
fn tilde_reward_mixes_controller_rewards() {
    let r = 2.0;
    let mdp = five_state_mdp(r, EPISODIC_DISCOUNT).unwrap();
    let ks = non_concavity_controllers().unwrap();
    assert!((tilde_reward(&mdp, &ks, 1, 0).unwrap() - r / 4.0).abs() < 1e-12);
    assert!((tilde_reward(&mdp, &ks, 1, 1).unwrap() - 3.0 * r / 4.0).abs() < 1e-12);
    assert!(tilde_reward(&mdp, &ks, 1, 2).is_err());
}

#[test]
fn bar_kernel_reset_frequency() {
    let mut rng = seeded(3);
    let mdp = random_mdp(4, 2, 0.9, &mut rng);
    let ks = random_controllers(2, 4, 2, &mut rng);
    let env = TabularEnv::new(mdp);
    let draws = 100_000;
    let count = |discount: f64, rng: &mut _| {
        let mut state = 0usize;
        let mut resets = 0;
        for _ in 0..draws {
            let s = sample_bar_kernel(&env, &ks, &state, 1, discount, rng).unwrap();
            resets += s.reset as usize;
            state = s.next;
        }
        resets as f64 / draws as f64
    };
    assert_eq!(count(1.0 - 1e-12, &mut rng), 0.0);
    let freq = count(0.9, &mut rng);
    assert!((freq - 0.1).abs() <= 0.01, "reset frequency {freq}");
}

#[test]
fn td_error_examples() {
    let e = td_error(&[1.0, 2.0], &[1.0, 0.0], &[0.0, 1.0], 0.5, 0.0).unwrap();
    assert!((e - 0.0).abs() < 1e-15);
    let e = td_error(&[0.2], &[1.0], &[1.0], 0.8, 0.0).unwrap();
    assert!((e + 0.04).abs() < 1e-15);
    assert!(td_error(&[1.0], &[1.0, 0.0], &[1.0], 0.5, 0.0).is_err());
}

#[test]
fn critic_stays_at_zero_without_reward() {
    let mdp = FiniteMdp::new(
        vec![vec![vec![0.5, 0.5]], vec![vec![0.5, 0.5]]],
        vec![vec![0.0], vec![0.0]],
        0.9,
        vec![1.0, 0.0],
    )
    .unwrap();
    let env = TabularEnv::new(mdp);
    let ks = ControllerSet::from_arrays(&[vec![vec![1.0], vec![1.0]]]).unwrap();
    let schedule = CriticSchedule { step: 0.5, outer: 50, inner: 10, discount: 0.9 };
    let out = critic_td(&env, &ks, &MixtureWeights::uniform(1), &OneHotFeatures { n_states: 2 }, schedule, 0, vec![0.0; 2], &mut seeded(0)).unwrap();
    assert_eq!(out.w, vec![0.0, 0.0]);
    assert_eq!(out.td_error_mean, 0.0);
}

#[test]
fn one_hot_critic_converges_to_policy_value() {
    let g = 0.5;
    let (env, ks) = two_cycle(g);
    let schedule = CriticSchedule { step: 0.2, outer: 5000, inner: 10, discount: g };
    let out = critic_td(&env, &ks, &MixtureWeights::uniform(1), &OneHotFeatures { n_states: 2 }, schedule, 0, vec![0.0; 2], &mut seeded(0)).unwrap();
    let exact = [1.0 / (1.0 - g * g), g / (1.0 - g * g)];
    assert!((out.w[0] - exact[0]).abs() < 1e-2 && (out.w[1] - exact[1]).abs() < 1e-2, "{:?}", out.w);
}

#[test]
fn critic_update_matches_hand_replay() {
    let g = 0.9;
    let (env, ks) = two_cycle(g);
    let schedule = CriticSchedule { step: 0.3, outer: 3, inner: 3, discount: g };
    let w0 = vec![0.5, -0.25];
    let out = critic_td(&env, &ks, &MixtureWeights::uniform(1), &OneHotFeatures { n_states: 2 }, schedule, 1, w0.clone(), &mut seeded(0)).unwrap();

    let mut w = w0;
    let mut s = 1usize;
    for _ in 0..3 {
        let mut acc = [0.0; 2];
        for _ in 0..3 {
            let next = 1 - s;
            let r = if s == 0 { 1.0 } else { 0.0 };
            let e = r + g * w[next] - w[s];
            acc[s] += e;
            s = next;
        }
        for i in 0..2 {
            w[i] += 0.3 / 3.0 * acc[i];
        }
    }
    assert!((out.w[0] - w[0]).abs() < 1e-14 && (out.w[1] - w[1]).abs() < 1e-14);
    assert_eq!(out.last_state, s);
}

#[test]
fn fisher_solve_examples() {
    let x = fisher_regularized_solve(&DMatrix::zeros(2, 2), 1.0, &DVector::from_vec(vec![1.0, 2.0])).unwrap();
    assert!((x - DVector::from_vec(vec![1.0, 2.0])).norm() < 1e-14);
    let f = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 3.0]));
    let x = fisher_regularized_solve(&f, 1.0, &DVector::from_vec(vec![2.0, 4.0])).unwrap();
    assert!((x - DVector::from_vec(vec![1.0, 1.0])).norm() < 1e-14);
    assert!(fisher_regularized_solve(&f, 0.0, &DVector::from_vec(vec![1.0, 1.0])).is_err());
}

#[test]
fn identical_controllers_keep_mixture_near_uniform() {
    let mut rng = seeded(12);
    let mdp = random_mdp(4, 2, 0.9, &mut rng);
    let one = random_controllers(1, 4, 2, &mut rng).matrices().unwrap()[0].clone();
    let rows: Vec<Vec<f64>> = (0..4).map(|s| one.row(s).iter().copied().collect()).collect();
    let ks = ControllerSet::from_arrays(&[rows.clone(), rows.clone(), rows]).unwrap();
    let mut env = TabularEnv::new(mdp);
    for mode in [AcMode::Ac, AcMode::Nac] {
        let cfg = AcilConfig {
            mode,
            outer_steps: 200,
            actor_step: 1e-3,
            critic_outer: 5,
            critic_inner: 10,
            actor_batch: 20,
            ..AcilConfig::default()
        };
        let trace = run_acil(&mut env, &ks, &OneHotFeatures { n_states: 4 }, &cfg).unwrap();
        let pi = trace.final_pi().unwrap();
        assert!(pi.iter().all(|p| (p - 1.0 / 3.0).abs() <= 0.1), "{mode:?}: {pi:?}");
        assert!(trace.output_theta.is_some());
        assert!(trace.records.iter().all(|r| r.ac.as_ref().unwrap().fisher_min_eig >= -1e-10));
    }
}

#[test]
fn mode_parsing() {
    assert_eq!("ac".parse::<AcMode>().unwrap(), AcMode::Ac);
    assert_eq!("nac".parse::<AcMode>().unwrap(), AcMode::Nac);
    assert!("sarsa".parse::<AcMode>().is_err());
}

#[test]
fn feature_maps() {
    let mut out = vec![9.0; 3];
    OneHotFeatures { n_states: 3 }.features(&1, &mut out);
    assert_eq!(out, vec![0.0, 1.0, 0.0]);
    let qf = QueueFeatures { n_queues: 2, cap: 10 };
    let mut out = vec![0.0; qf.dim()];
    let state: QueueState = vec![5, 10];
    qf.features(&state, &mut out);
    let scale = 1.0 / (10.0 * 2f64.sqrt());
    assert!((out[0] - 5.0 * scale).abs() < 1e-15 && (out[1] - 10.0 * scale).abs() < 1e-15);
}

proptest! {
    #[test]
    fn fisher_solve_has_small_residual(entries in prop::collection::vec(-2.0f64..2.0, 9), rhs in prop::collection::vec(-5.0f64..5.0, 3), lambda in 1e-3f64..1.0) {
        let a = DMatrix::from_vec(3, 3, entries);
        let f = &a * a.transpose();
        let b = DVector::from_vec(rhs);
        let x = fisher_regularized_solve(&f, lambda, &b).unwrap();
        let resid = (&f * &x + &x * lambda - &b).norm();
        prop_assert!(resid <= 1e-9 * b.norm().max(1.0));
    }
}
