//! End-to-end acceptance checks, one line per criterion.
//!
//! Runs as a plain binary (`harness = false`) so the report is printed
//! whether or not a check fails. A criterion listed in [`KNOWN_FAILURES`]
//! is expected to fail for a documented reason; the binary exits nonzero if
//! any other criterion fails or if a known failure starts passing.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use improper::diagnostics::{
    empirical_lyapunov, lyapunov_bound, random_instance, regret, regret_envelope, run_lemma_suite, InstanceDims,
    LemmaSuiteConfig,
};
use improper::envs::bandit::BanditInstance;
use improper::envs::chain::{chain_controllers, chain_mdp};
use improper::envs::counterexamples::counterexample_mdps;
use improper::envs::epls::{
    cartpole_epls, draw_destabilizing_perturbation, CartpoleParams, Discretization, EplsSystem, DEFAULT_EULER_DT,
    REFERENCE_GAIN_EULER,
};
use improper::harness::{preset, run_experiment, BanditSpec, Experiment, ExperimentConfig, PRESET_IDS};
use improper::mdp::FiniteMdp;
use improper::mixture::{exact_value_gradient, induced_policy, ControllerSet};
use improper::pg::{run_bandit_pg_exact, run_bandit_projection_free};
use improper::rng::{seeded, stream, StreamRole};
use nalgebra::{Matrix4, Vector4};
use rand::Rng as _;
use serde_json::Value;

type Check = Result<(bool, String), String>;

/// Criteria that cannot pass as stated, with the reason.
const KNOWN_FAILURES: &[(u32, &str)] = &[(
    4,
    "the two printed chain closed forms disagree with exact evaluation of the described chain; \
     evaluation gives 0.1γ⁸/(1-0.9γ²) and 0.3025γ⁸/(1-0.4455γ²)",
)];

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

// --- independent oracles -------------------------------------------------

/// Value of a flat policy by fixed-point iteration of the Bellman operator.
fn iterate_value(mdp: &FiniteMdp, policy: &[Vec<f64>]) -> Vec<f64> {
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

/// `V^{softmax(θ)}(μ)` through the fixed-point oracle, mixing the
/// controllers by hand.
fn oracle_value(mdp: &FiniteMdp, ks: &ControllerSet, theta: &[f64], mu: &[f64]) -> f64 {
    let z: f64 = theta.iter().map(|t| (t - theta[0]).exp()).sum();
    let w: Vec<f64> = theta.iter().map(|t| (t - theta[0]).exp() / z).collect();
    let mats = ks.matrices().expect("tabular");
    let policy: Vec<Vec<f64>> = (0..mdp.n_states())
        .map(|s| (0..mdp.n_actions()).map(|a| mats.iter().zip(&w).map(|(k, p)| p * k[(s, a)]).sum()).collect())
        .collect();
    iterate_value(mdp, &policy).iter().zip(mu).map(|(v, p)| v * p).sum()
}

// --- criteria ------------------------------------------------------------

fn c1_gradient_oracle() -> Check {
    let mut rng = seeded(101);
    let dims = InstanceDims { max_states: 8, max_actions: 4, max_controllers: 4 };
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let inst = random_instance(dims, &[0.5, 0.9], &mut rng).map_err(err)?;
        let theta: Vec<f64> = (0..inst.controllers.len()).map(|_| rng.random_range(-2.0..2.0)).collect();
        let g = exact_value_gradient(&inst.mdp, &inst.controllers, &theta, &inst.mu).map_err(err)?;
        for m in 0..theta.len() {
            let (mut up, mut down) = (theta.clone(), theta.clone());
            up[m] += h;
            down[m] -= h;
            let fd = (oracle_value(&inst.mdp, &inst.controllers, &up, &inst.mu)
                - oracle_value(&inst.mdp, &inst.controllers, &down, &inst.mu))
                / (2.0 * h);
            worst = worst.max((g[m] - fd).abs());
        }
    }
    Ok((worst <= 1e-4, format!("100 instances, max |g - fd| = {worst:.2e} (tol 1e-4)")))
}

fn c2_lemma_suite() -> Check {
    let mut rng = stream(7, 0, StreamRole::Instance);
    let reports = run_lemma_suite(&LemmaSuiteConfig::default(), &mut rng).map_err(err)?;
    let loj = reports.iter().find(|r| r.lemma.contains("lojasiewicz"));
    let enough = loj.is_some_and(|r| r.instances >= 200);
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.lemma.as_str()).collect();
    let detail = reports
        .iter()
        .map(|r| format!("{}: {} checked", r.lemma, r.instances))
        .collect::<Vec<_>>()
        .join("; ");
    Ok((failed.is_empty() && enough, if failed.is_empty() { detail } else { format!("violations in {failed:?}") }))
}

fn c3_counterexamples() -> Check {
    let mut worst: f64 = 0.0;
    let mut strict = true;
    for r in [1.0, 2.0, 0.3] {
        for ce in counterexample_mdps(r).map_err(err)? {
            for ev in &ce.expected {
                let v = ce.mdp.evaluate_policy(&induced_policy(&ce.controllers, &ev.weights).map_err(err)?).map_err(err)?;
                worst = worst.max((v[ev.state] - ev.value).abs());
            }
            if ce.name == "non-concavity" {
                let at = |w: [f64; 2]| -> Result<f64, String> {
                    Ok(ce.mdp.evaluate_policy(&induced_policy(&ce.controllers, &w).map_err(err)?).map_err(err)?[0])
                };
                let chord = 0.5 * at([1.0, 0.0])? + 0.5 * at([0.0, 1.0])?;
                let mid = at([0.5, 0.5])?;
                worst = worst.max((chord - 10.0 * r / 32.0).abs()).max((mid - 8.0 * r / 32.0).abs());
                strict &= chord > mid;
            }
        }
    }
    Ok((worst <= 1e-12 && strict, format!("max deviation {worst:.1e} over r in {{1, 2, 0.3}}; chord above midpoint: {strict}")))
}

fn c4_chain() -> Check {
    let g: f64 = 0.9;
    let mdp = chain_mdp(g).map_err(err)?;
    let ks = chain_controllers().map_err(err)?;
    let value = |w: [f64; 2]| -> Result<f64, String> {
        Ok(mdp.evaluate_policy(&induced_policy(&ks, &w).map_err(err)?).map_err(err)?[0])
    };
    let (v1, vmix) = (value([1.0, 0.0])?, value([0.5, 0.5])?);
    let printed_single = 0.1 * g.powi(9) / (1.0 - 0.1 * 0.9 * g * g);
    let printed_mix = 0.55f64.powi(2) * g.powi(9) / (1.0 - 2.0 * 0.55 * 0.45 * g * g);
    let forms_ok = (v1 - printed_single).abs() <= 1e-10 && (vmix - printed_mix).abs() <= 1e-10;
    let mix_better = vmix > v1;

    let cfg = preset("chain-pg").map_err(err)?;
    let out = run_experiment(&cfg).map_err(err)?;
    let finals: Vec<f64> = out.trials.iter().flatten().filter_map(|t| t.trace.as_ref()?.final_pi().map(|p| p[0])).collect();
    let worst_pi = finals.iter().map(|p| (p - 0.5).abs()).fold(0.0, f64::max);
    let converged = finals.len() == cfg.trials && worst_pi <= 0.05;
    Ok((
        forms_ok && mix_better && converged,
        format!(
            "V^K1(s1) = {v1:.6} vs printed {printed_single:.6}; V^mix(s1) = {vmix:.6} vs printed {printed_mix:.6}; \
             mix > K1: {mix_better}; PG max |π(1) - 0.5| = {worst_pi:.1e} over {} trials",
            finals.len()
        ),
    ))
}

fn c5_bandit_rate() -> Check {
    let g = 0.9;
    let mut ok = true;
    let mut notes = Vec::new();
    for m in [2usize, 5, 10] {
        let mut worst_ratio: f64 = 0.0;
        let mut worst_regret: f64 = 0.0;
        for seed in 0..5u64 {
            let mut rng = stream(seed, m as u64, StreamRole::Instance);
            let inst = BanditInstance::random(m, 10, g, 0.1, &mut rng).map_err(err)?;
            let v_star = inst.best().1 / (1.0 - g);
            let trace = run_bandit_pg_exact(&inst, 10_000, 1).map_err(err)?;
            let reg = regret(&trace, v_star).map_err(err)?;
            for (rec, r) in trace.records.iter().zip(&reg) {
                let t = rec.step as f64;
                let bound = 5.0 * (m * m) as f64 / ((1.0 - g) * t);
                worst_ratio = worst_ratio.max((v_star - rec.value) / bound);
                if rec.step >= 2 {
                    worst_regret = worst_regret.max(r / regret_envelope(m, g, rec.step));
                }
            }
        }
        ok &= worst_ratio <= 1.0 && worst_regret <= 1.0;
        notes.push(format!("M={m}: subopt/bound {worst_ratio:.3}, regret/envelope {worst_regret:.3}"));
    }
    Ok((ok, format!("{} (5 instances each, t ≤ 1e4; envelope from t = 2)", notes.join("; "))))
}

fn c6_projection_free() -> Check {
    let inst = BanditInstance::direct(vec![0.9, 0.5], 0.9).map_err(err)?;
    let mut simplex_ok = true;
    let mut final_best = 0.0;
    for seed in 0..20u64 {
        let mut rng = stream(seed, 0, StreamRole::Learner);
        let trace = run_bandit_projection_free(&inst, 0.5, 100_000, 1, &mut rng).map_err(err)?;
        simplex_ok &= trace.records.len() == 100_000;
        for r in &trace.records {
            let sum: f64 = r.pi.iter().sum();
            simplex_ok &= r.pi.iter().all(|&p| p >= 0.0) && (sum - 1.0).abs() <= 1e-12;
        }
        final_best += trace.final_pi().map_or(0.0, |p| p[0]) / 20.0;
    }
    Ok((simplex_ok && final_best >= 0.99, format!("simplex held on 20 x 1e5 steps: {simplex_ok}; mean π_T(m*) = {final_best:.4}")))
}

fn c7_two_queue_spge() -> Check {
    let out = run_experiment(&preset("queue-equal-rates").map_err(err)?).map_err(err)?;
    let pi = out.summary.final_pi_mean.clone().ok_or("no final mixture")?;
    let ct = out.summary.ct_global_min.ok_or("no c̄ series")?;
    Ok((
        !out.summary.failed() && (0.4..=0.6).contains(&pi[0]) && ct > 0.15,
        format!("mean final π(K1) = {:.4}; smallest terminal c̄ = {ct:.4}", pi[0]),
    ))
}

fn delay_mean(table: &Value, id: &str) -> Result<f64, String> {
    table[id]["mean"].as_f64().ok_or_else(|| format!("no delay entry for {id}"))
}

fn c8_path_graph() -> Check {
    let out = run_experiment(&preset("path-graph-5").map_err(err)?).map_err(err)?;
    let pi = out.summary.final_pi_mean.clone().ok_or("no final mixture")?;
    let table = out.summary.extra.get("mean_delay").ok_or("no delay table")?;
    let (mw, mer) = (delay_mean(table, "mw")?, delay_mean(table, "mer")?);
    let fixed = ["fixed:{1,3}", "fixed:{2,4}", "fixed:{1,4}"]
        .iter()
        .map(|id| delay_mean(table, id))
        .collect::<Result<Vec<_>, _>>()?;
    let within = |x: f64, target: f64| (x - target).abs() <= 0.15 * target;
    let fixed_far = fixed.iter().all(|&f| f > 3.0 * mw);
    let pass = !out.summary.failed()
        && pi[1] >= 0.9
        && mer < mw
        && within(mer, 20.96)
        && within(mw, 22.11)
        && fixed_far;
    Ok((
        pass,
        format!(
            "mean final π(MER) = {:.4}; delay MER {mer:.2}, MW {mw:.2}, fixed {:.1}/{:.1}/{:.1}",
            pi[1], fixed[0], fixed[1], fixed[2]
        ),
    ))
}

fn c9_nacil() -> Check {
    let eq = run_experiment(&preset("nacil-queues").map_err(err)?).map_err(err)?;
    let pi_eq = eq.summary.final_pi_mean.clone().ok_or("no final mixture")?;
    let eq_ok = !eq.summary.failed() && pi_eq.iter().all(|p| (p - 0.5).abs() <= 0.1);

    let corner = run_experiment(&preset("nacil-corner").map_err(err)?).map_err(err)?;
    let pi_c = corner.summary.final_pi_mean.clone().ok_or("no final mixture")?;
    let corner_ok = !corner.summary.failed() && pi_c[2] >= 0.8;

    let cfg = preset("nacil-transition").map_err(err)?;
    let change = match &cfg.experiment {
        Experiment::Acil { network, .. } => network.schedule.first().map(|c| c.at_step).ok_or("no rate change")?,
        _ => return Err("transition preset is not an actor-critic run".into()),
    };
    let tr = run_experiment(&cfg).map_err(err)?;
    let agg = tr.aggregate.as_ref().ok_or("no aggregate")?;
    let before = agg.steps.iter().rposition(|&s| s <= change).ok_or("no record before the change")?;
    let (pi_before, pi_end) = (agg.pi_mean[before][0], agg.pi_mean.last().ok_or("empty aggregate")?[0]);
    let crossed = pi_before > 0.5 && pi_end < 0.5;
    Ok((
        eq_ok && corner_ok && crossed && !tr.summary.failed(),
        format!(
            "λ=(0.4,0.4): π = ({:.3}, {:.3}); corner π(LQF) = {:.3}; transition π(K1) {pi_before:.3} at step {} -> {pi_end:.3}",
            pi_eq[0], pi_eq[1], pi_c[2], agg.steps[before]
        ),
    ))
}

/// Pair of rank-one feedback systems on `0.2 I` with `b = e₁`: the zero
/// gain is stable, the other two stretch the first coordinate by 1.5 and 2.
fn constructed_system() -> EplsSystem {
    let b = Vector4::new(1.0, 0.0, 0.0, 0.0);
    let gains = vec![Vector4::zeros(), Vector4::new(-1.3, 0.0, 0.0, 0.0), Vector4::new(-1.8, 0.0, 0.0, 0.0)];
    EplsSystem { a_open: Matrix4::identity() * 0.2, b, gains, discretization: Discretization::Direct, noise: 0.0 }
}

fn c10_epls() -> Check {
    let params = CartpoleParams::default();
    let disc = Discretization::Euler { dt: DEFAULT_EULER_DT };
    let reference = Vector4::from_column_slice(&REFERENCE_GAIN_EULER);
    let p = [0.53, 0.47];
    let mut within = 0;
    for seed in 0..200u64 {
        let mut inst = stream(seed, 0, StreamRole::Instance);
        let (delta, _) = draw_destabilizing_perturbation(params, reference, disc, 3.0, 1.005, 100_000, &mut inst).map_err(err)?;
        let sys = EplsSystem::cartpole(params, vec![reference + delta, reference - delta], disc);
        let bound = lyapunov_bound(&sys, &p).map_err(err)?;
        let mut rng = stream(seed, 0, StreamRole::Evaluation);
        let x0 = Vector4::from_fn(|_, _| rng.random_range(-0.05..=0.05));
        let est = empirical_lyapunov(&cartpole_epls(&sys, &p, 5000, x0, &mut rng).map_err(err)?).map_err(err)?;
        within += usize::from(est.exponent <= bound + 0.05);
    }
    let bound_ok = within >= 190;

    let sys = constructed_system();
    let mix = [0.6, 0.2, 0.2];
    let mix_bound = lyapunov_bound(&sys, &mix).map_err(err)?;
    let x0 = Vector4::new(1.0, 1.0, 1.0, 1.0);
    let mut decays = true;
    for seed in 0..20u64 {
        let mut rng = stream(seed, 1, StreamRole::Evaluation);
        let est = empirical_lyapunov(&cartpole_epls(&sys, &mix, 2000, x0, &mut rng).map_err(err)?).map_err(err)?;
        decays &= est.exponent < 0.0;
    }
    let mut rng = seeded(0);
    let unstable: Vec<f64> = [[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
        .iter()
        .map(|q| cartpole_epls(&sys, q, 200, x0, &mut rng).map(|t| t.states[200].norm()))
        .collect::<Result<_, _>>()
        .map_err(err)?;
    let diverge = unstable.iter().all(|&n| n > 1e20);

    let falls = run_experiment(&preset("cartpole-epls").map_err(err)?).map_err(err)?;
    let mean_falls = |name: &str| falls.summary.extra["falls"][name]["mean_fall_count"].as_f64().unwrap_or(f64::NAN);
    let (k1, k2, km) = (mean_falls("K1"), mean_falls("K2"), mean_falls("mixture"));
    let ordering = km < k1.min(k2);
    Ok((
        bound_ok && mix_bound < 0.0 && decays && diverge && ordering,
        format!(
            "bound held on {within}/200 seeds; constructed mixture bound {mix_bound:.3}, decays: {decays}, \
             unstable gains diverge: {diverge}; mean falls K1 {k1:.1}, K2 {k2:.1}, mixture {km:.1}"
        ),
    ))
}

/// Shrinks a preset so a pair of reruns stays cheap.
fn shrink(mut cfg: ExperimentConfig) -> ExperimentConfig {
    cfg.trials = 3;
    match &mut cfg.experiment {
        Experiment::SoftmaxPg { pg, .. } => pg.horizon = pg.horizon.min(300),
        Experiment::Spge { pg, delay_table, .. } => {
            pg.horizon = 150;
            if let Some(dt) = delay_table {
                dt.rollouts = 40;
            }
        }
        Experiment::BanditExact { horizon, bandit, .. } => {
            *horizon = 500;
            if let BanditSpec::Random { controllers, .. } = bandit {
                *controllers = 3;
            }
        }
        Experiment::BanditNoisy { horizon, .. } => *horizon = 5000,
        Experiment::Acil { acil, network, .. } => {
            acil.outer_steps = 300;
            for c in &mut network.schedule {
                c.at_step = 100;
            }
        }
        Experiment::CartpoleFalls(c) => c.episodes = 10,
        Experiment::ValidateLemmas { suite } => {
            cfg.trials = 1;
            *suite = LemmaSuiteConfig {
                gradient_cases: 5,
                value_difference_cases: 5,
                lojasiewicz_cases: 5,
                lojasiewicz_max_draws: 200,
                smoothness_cases: 5,
                smoothness_probes: 4,
                centering_cases: 5,
                ..LemmaSuiteConfig::default()
            };
        }
    }
    cfg
}

fn read_dir(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let mut files = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(err)? {
        let path = entry.map_err(err)?.path();
        let name = path.file_name().and_then(|n| n.to_str()).ok_or("bad file name")?.to_string();
        files.insert(name, std::fs::read(&path).map_err(err)?);
    }
    Ok(files)
}

fn c11_determinism() -> Check {
    let mut mismatched = Vec::new();
    let mut file_count = 0;
    for id in PRESET_IDS {
        let cfg = shrink(preset(id).map_err(err)?);
        let mut dirs = Vec::new();
        for jobs in [1, 2] {
            let dir = tempfile::tempdir().map_err(err)?;
            let cfg = ExperimentConfig { jobs: Some(jobs), ..cfg.clone() };
            run_experiment(&cfg).map_err(err)?.write(dir.path()).map_err(err)?;
            dirs.push(dir);
        }
        let (a, b) = (read_dir(dirs[0].path())?, read_dir(dirs[1].path())?);
        file_count += a.len();
        if a != b || a.is_empty() {
            mismatched.push(id);
        }
    }
    Ok((
        mismatched.is_empty(),
        format!("{} presets rerun with 1 and 2 workers, {file_count} files compared; mismatches: {mismatched:?}", PRESET_IDS.len()),
    ))
}

type Criterion = (u32, &'static str, f64, fn() -> Check);

fn main() {
    let criteria: [Criterion; 11] = [
        (1, "exact gradient vs finite differences", 30.0, c1_gradient_oracle),
        (2, "lemma suite", 120.0, c2_lemma_suite),
        (3, "counterexample values", 1.0, c3_counterexamples),
        (4, "chain closed forms and PG convergence", 10.0, c4_chain),
        (5, "bandit exact-gradient rate and regret", 20.0, c5_bandit_rate),
        (6, "projection-free bandit", 60.0, c6_projection_free),
        (7, "SPGE on two queues", 600.0, c7_two_queue_spge),
        (8, "SPGE on the path graph and delay table", 900.0, c8_path_graph),
        (9, "NACIL on queues", 1200.0, c9_nacil),
        (10, "EPLS stability and cartpole falls", 300.0, c10_epls),
        (11, "determinism", f64::INFINITY, c11_determinism),
    ];
    let filter: Option<Vec<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut unexpected = 0;
    for (id, title, budget, run) in criteria {
        if filter.as_ref().is_some_and(|f| !f.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let result = run();
        let secs = start.elapsed().as_secs_f64();
        let (passed, detail) = match result {
            Ok((ok, detail)) => (ok && secs <= budget, detail),
            Err(e) => (false, format!("error: {e}")),
        };
        let known = KNOWN_FAILURES.iter().find(|(k, _)| *k == id);
        let status = match (passed, known) {
            (true, None) => "PASS",
            (false, Some(_)) => "FAIL (known)",
            (false, None) => {
                unexpected += 1;
                "FAIL"
            }
            (true, Some(_)) => {
                unexpected += 1;
                "PASS (listed as known failure)"
            }
        };
        let limit = if budget.is_finite() { format!("limit {budget}s") } else { "no time limit".into() };
        println!("criterion {id:>2} [{status}] {title} ({secs:.1}s, {limit}): {detail}");
        if let (false, Some((_, why))) = (passed, known) {
            println!("             known failure: {why}");
        }
    }
    if unexpected > 0 {
        println!("{unexpected} criterion result(s) differ from expectations");
        std::process::exit(1);
    }
}
