mod common;

use common::{max_abs_diff, naive_softmax, oracle_gradient, random_controllers, random_mdp};
use improper::envs::counterexamples::{five_state_mdp, non_concavity_controllers, EPISODIC_DISCOUNT};
use improper::mdp::FiniteMdp;
use improper::mixture::{
    exact_value_gradient, induced_policy, mixture_value, score, softmax, tilde_q_advantage, ControllerSet,
    MixtureWeights,
};
use improper::rng::seeded;
use proptest::prelude::*;
use rand::Rng as _;

#[test]
fn softmax_examples() {
    assert_eq!(softmax(&[0.0; 4]).unwrap().to_vec(), vec![0.25; 4]);
    assert_eq!(softmax(&[1.0, 1.0]).unwrap().to_vec(), vec![0.5, 0.5]);
    let pi = softmax(&[700.0, 0.0]).unwrap();
    assert_eq!(pi[0], 1.0);
    // exp(-700) computed directly, far below the naive overflow point.
    assert!((pi[1] / (-700f64).exp() - 1.0).abs() < 1e-12);
    assert!(pi[1] > 0.0);
    assert!(softmax(&[]).is_err());
    assert!(softmax(&[f64::NAN, 0.0]).is_err());
}

#[test]
fn single_controller_induces_itself() {
    let mut rng = seeded(4);
    let ks = random_controllers(1, 5, 3, &mut rng);
    let p = induced_policy(&ks, &[1.0]).unwrap();
    assert_eq!(p.matrix(), ks.matrices().unwrap()[0]);
}

#[test]
fn non_concavity_equal_mixture_row() {
    let p = induced_policy(&non_concavity_controllers().unwrap(), &[0.5, 0.5]).unwrap();
    assert_eq!((0..3).map(|a| p.prob(0, a)).collect::<Vec<_>>(), vec![0.5, 0.5, 0.0]);
}

#[test]
fn score_examples() {
    assert_eq!(score(&[0.0, 0.0], 0).unwrap(), vec![0.5, -0.5]);
    assert!(score(&[0.0, 0.0], 2).is_err());
}

#[test]
fn identical_controllers_have_no_advantage_or_gradient() {
    let mut rng = seeded(5);
    let mdp = random_mdp(5, 3, 0.9, &mut rng);
    let one = random_controllers(1, 5, 3, &mut rng);
    let k = one.matrices().unwrap()[0].clone();
    let rows: Vec<Vec<f64>> = (0..5).map(|s| k.row(s).iter().copied().collect()).collect();
    let ks = ControllerSet::from_arrays(&[rows.clone(), rows]).unwrap();
    let tv = tilde_q_advantage(&mdp, &ks, &[0.3, 0.7]).unwrap();
    assert!(tv.adv.amax() < 1e-12);
    let g = exact_value_gradient(&mdp, &ks, &[0.4, -1.0], mdp.start_dist()).unwrap();
    assert!(g.iter().all(|x| x.abs() < 1e-12));
}

#[test]
fn tilde_q_on_non_concavity_instance() {
    // Under pure K1 the value at s2 is π(up|s2) r = r/4; K2 plays up with
    // probability 3/4 at s2, so Q̃(s2, K2) = 3r/4.
    let mdp = five_state_mdp(1.0, EPISODIC_DISCOUNT).unwrap();
    let tv = tilde_q_advantage(&mdp, &non_concavity_controllers().unwrap(), &[1.0, 0.0]).unwrap();
    assert!((tv.q[(1, 1)] - 0.75).abs() < 1e-12);
    assert!((tv.v[1] - 0.25).abs() < 1e-12);
}

#[test]
fn bandit_gradient_closed_form() {
    let means = [0.8, 0.2, 0.5];
    let g = 0.9;
    let mdp = FiniteMdp::new(vec![vec![vec![1.0]; 3]], vec![means.to_vec()], g, vec![1.0]).unwrap();
    let ks = ControllerSet::from_arrays(&[
        vec![vec![1.0, 0.0, 0.0]],
        vec![vec![0.0, 1.0, 0.0]],
        vec![vec![0.0, 0.0, 1.0]],
    ])
    .unwrap();
    let theta = [0.3, -0.2, 1.1];
    let pi = naive_softmax(&theta);
    let avg: f64 = pi.iter().zip(&means).map(|(p, r)| p * r).sum();
    let expected: Vec<f64> = pi.iter().zip(&means).map(|(p, r)| p * (r - avg) / (1.0 - g)).collect();
    let grad = exact_value_gradient(&mdp, &ks, &theta, &[1.0]).unwrap();
    assert!(max_abs_diff(&grad, &expected) < 1e-12);
}

#[test]
fn gradient_matches_finite_differences_on_fixed_instance() {
    let mut rng = seeded(11);
    let mdp = random_mdp(5, 3, 0.9, &mut rng);
    let ks = random_controllers(4, 5, 3, &mut rng);
    let theta = [0.2, -0.4, 1.0, 0.0];
    let g = exact_value_gradient(&mdp, &ks, &theta, mdp.start_dist()).unwrap();
    let fd = oracle_gradient(&mdp, &ks, &theta, mdp.start_dist(), 1e-5);
    assert!(max_abs_diff(&g, &fd) <= 1e-4);
}

#[test]
fn black_box_sets_refuse_exact_operations() {
    use improper::envs::queue::{controller_set, QueueEnvConfig, QueueNetwork};
    let net = QueueNetwork::new(QueueEnvConfig::two_queue([0.3, 0.3])).unwrap();
    let ks = controller_set(&net, &["serve_queue_1", "lqf"]).unwrap();
    assert!(matches!(ks.matrices(), Err(improper::Error::Unsupported(_))));
}

#[test]
fn controller_set_json_round_trip() {
    let ks = random_controllers(3, 4, 2, &mut seeded(2));
    let back = ControllerSet::from_json(&ks.to_json().unwrap()).unwrap();
    assert_eq!(ks.matrices().unwrap(), back.matrices().unwrap());
}

#[test]
fn mixture_weights_validate() {
    assert!(MixtureWeights::new(vec![0.5, 0.6]).is_err());
    assert!(MixtureWeights::new(vec![]).is_err());
    assert_eq!(MixtureWeights::vertex(3, 1).to_vec(), vec![0.0, 1.0, 0.0]);
}

fn theta_strategy(max: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-20.0f64..20.0, 1..=max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn softmax_is_shift_invariant(theta in theta_strategy(6), c in -500.0f64..500.0) {
        let a = softmax(&theta).unwrap();
        let shifted: Vec<f64> = theta.iter().map(|t| t + c).collect();
        let b = softmax(&shifted).unwrap();
        prop_assert!(max_abs_diff(&a, &b) <= 1e-12);
    }

    #[test]
    fn softmax_matches_naive_form(theta in theta_strategy(6)) {
        prop_assert!(max_abs_diff(&softmax(&theta).unwrap(), &naive_softmax(&theta)) <= 1e-14);
    }

    #[test]
    fn softmax_lies_on_simplex(theta in prop::collection::vec(-1e3f64..1e3, 1..8)) {
        let pi = softmax(&theta).unwrap();
        prop_assert!(pi.iter().all(|&p| (0.0..=1.0).contains(&p)));
        prop_assert!((pi.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn score_sums_to_zero_and_matches_log_derivative(theta in theta_strategy(5), pick in any::<prop::sample::Index>()) {
        let m = pick.index(theta.len());
        let psi = score(&theta, m).unwrap();
        prop_assert!(psi.iter().sum::<f64>().abs() <= 1e-12);
        let h = 1e-6;
        for j in 0..theta.len() {
            let (mut up, mut down) = (theta.clone(), theta.clone());
            up[j] += h;
            down[j] -= h;
            let fd = (softmax(&up).unwrap()[m].ln() - softmax(&down).unwrap()[m].ln()) / (2.0 * h);
            prop_assert!((fd - psi[j]).abs() <= 1e-6, "coordinate {j}: {fd} vs {}", psi[j]);
        }
    }

    #[test]
    fn induced_rows_are_distributions(seed in any::<u64>(), nm in 1usize..5, ns in 1usize..7, na in 1usize..5) {
        let mut rng = seeded(seed);
        let ks = random_controllers(nm, ns, na, &mut rng);
        let theta: Vec<f64> = (0..nm).map(|_| rng.random_range(-3.0..3.0)).collect();
        let p = induced_policy(&ks, &softmax(&theta).unwrap()).unwrap();
        for s in 0..ns {
            let sum: f64 = (0..na).map(|a| p.prob(s, a)).sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn tilde_q_mixes_to_value(seed in any::<u64>(), nm in 1usize..5) {
        let mut rng = seeded(seed);
        let mdp = random_mdp(5, 3, 0.9, &mut rng);
        let ks = random_controllers(nm, 5, 3, &mut rng);
        let theta: Vec<f64> = (0..nm).map(|_| rng.random_range(-2.0..2.0)).collect();
        let pi = softmax(&theta).unwrap();
        let tv = tilde_q_advantage(&mdp, &ks, &pi).unwrap();
        for s in 0..5 {
            let mixed: f64 = (0..nm).map(|m| pi[m] * tv.q[(s, m)]).sum();
            prop_assert!((mixed - tv.v[s]).abs() <= 1e-10);
        }
    }

    #[test]
    fn gradient_matches_oracle_differences(seed in any::<u64>()) {
        let mut rng = seeded(seed);
        let (ns, na, nm) = (rng.random_range(2..7), rng.random_range(2..4), rng.random_range(2..5));
        let g = if rng.random::<bool>() { 0.5 } else { 0.9 };
        let mdp = random_mdp(ns, na, g, &mut rng);
        let ks = random_controllers(nm, ns, na, &mut rng);
        let theta: Vec<f64> = (0..nm).map(|_| rng.random_range(-2.0..2.0)).collect();
        let grad = exact_value_gradient(&mdp, &ks, &theta, mdp.start_dist()).unwrap();
        let fd = oracle_gradient(&mdp, &ks, &theta, mdp.start_dist(), 1e-5);
        prop_assert!(max_abs_diff(&grad, &fd) <= 1e-4);
        // Softmax gradients are orthogonal to the all-ones direction.
        prop_assert!(grad.iter().sum::<f64>().abs() <= 1e-10);
        let v = mixture_value(&mdp, &ks, &softmax(&theta).unwrap(), mdp.start_dist()).unwrap();
        prop_assert!((v - common::oracle_value_at_theta(&mdp, &ks, &theta, mdp.start_dist())).abs() <= 1e-10);
    }
}
