//! End-to-end acceptance checks. Each test prints one PASS/FAIL line.

use std::fs;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use dro::doubling::{default_sgm, doubling_minimize, DoublingConfig};
use dro::estimators::{
    level_probability, minibatch_estimate, mlmc_estimate, mlmc_level_estimate, EstimatorKind, MlmcConfig, MlmcTarget,
};
use dro::inner::{dual_value, primal_value, robust_grad_from_inner, solve};
use dro::optim::{run, Averaging, ExactGradient, Momentum, RobustObjective, SgmConfig};
use dro::oracle::{
    bernoulli_cvar_surrogate, bernoulli_surrogate, finite_diff_grad, full_batch, full_batch_grad, mc_bias_estimate,
    simplex_grid_max, trace_variance,
};
use dro::problems::{bernoulli_linear, cvar_lecam, evaluate_batch, synthetic_logistic, three_point_hard, Problem};
use dro::stats::{loglog_slope, mean_stderr};
use dro::{LossBatch, RngStream, RobustSpec};

fn report(criterion: u32, passed: bool, detail: &str, elapsed: Duration, limit: Duration) {
    let in_time = elapsed <= limit;
    let status = if passed && in_time { "PASS" } else { "FAIL" };
    println!("criterion {criterion}: {status}  {detail}  ({:.1}s, limit {}s)", elapsed.as_secs_f64(), limit.as_secs());
    assert!(passed, "criterion {criterion}: {detail}");
    assert!(in_time, "criterion {criterion} took {elapsed:?}");
}

fn random_specs(rng: &mut ChaCha8Rng) -> [RobustSpec; 4] {
    let alpha = rng.gen_range(0.2..1.0);
    [
        RobustSpec::Cvar { alpha },
        RobustSpec::KlCvar {
            alpha,
            lambda: rng.gen_range(0.2..2.0),
        },
        RobustSpec::Chi2Pen {
            lambda: rng.gen_range(0.2..2.0),
        },
        RobustSpec::Chi2Con {
            rho: rng.gen_range(0.05..2.0),
        },
    ]
}

#[test]
fn criterion_1_inner_solvers_match_grid_search() {
    let start = Instant::now();
    let cases: Vec<(Vec<f64>, RobustSpec)> = {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        (0..100)
            .flat_map(|_| {
                let values: Vec<f64> = (0..3).map(|_| rng.gen_range(0.0..1.0)).collect();
                random_specs(&mut rng).map(|s| (values.clone(), s))
            })
            .collect()
    };
    let worst = cases
        .par_iter()
        .map(|(values, spec)| {
            let sol = solve(&LossBatch::new(values.clone()).unwrap(), spec).unwrap();
            let grid = simplex_grid_max(values, spec, 2e-3).unwrap();
            (sol.value - grid).abs()
        })
        .reduce(|| 0.0, f64::max);
    report(
        1,
        worst <= 5e-3,
        &format!("400 cases, max |solver - grid| = {worst:.2e}"),
        start.elapsed(),
        Duration::from_secs(10),
    );
}

#[test]
fn criterion_2_primal_dual_consistency() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.gen_range(1..=100);
        let scale = rng.gen_range(0.1..10.0);
        let values: Vec<f64> = (0..n).map(|_| scale * rng.gen_range(-1.0..1.0)).collect();
        let mut batch = LossBatch::new(values).unwrap();
        if rng.gen_bool(0.5) {
            let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..1.0)).collect();
            let total: f64 = w.iter().sum();
            batch = batch.with_probs(w.iter().map(|v| v / total).collect()).unwrap();
        }
        for spec in random_specs(&mut rng) {
            let sol = solve(&batch, &spec).unwrap();
            let primal = primal_value(&batch, &spec, sol.weights.as_slice());
            let dual = dual_value(&batch, &spec, sol.eta);
            worst = worst.max((primal - dual).abs()).max((primal - sol.value).abs());
        }
    }
    report(
        2,
        worst <= 1e-7,
        &format!("1000 batches x 4 objectives, max |primal - dual| = {worst:.2e}"),
        start.elapsed(),
        Duration::from_secs(10),
    );
}

#[test]
fn criterion_3_bias_sign_and_decay() {
    let start = Instant::now();
    let (alpha, b) = (0.1, 1.0);
    let mut ok = true;
    let mut detail = String::from("cvar bias");
    for n in [10u64, 100, 1_000, 10_000] {
        let bias = b - bernoulli_cvar_surrogate(alpha, n, b).unwrap();
        let scale = b / (alpha * n as f64).sqrt();
        let (lo, hi) = (0.05 * 0.9f64.sqrt() * scale, 3.0 * scale);
        ok &= bias >= lo && bias <= hi;
        detail += &format!(" n={n}:{bias:.4}[{lo:.4},{hi:.4}]");
    }

    // χ²-penalty: Monte Carlo sweep on Bernoulli(λ/B) losses.
    let lambda = 0.25;
    let spec = RobustSpec::Chi2Pen { lambda };
    let p = bernoulli_linear(lambda / b, b, 1.0).unwrap();
    let exact = full_batch(&p, &[1.0], &spec).unwrap().value;
    let ns = [10usize, 40, 160, 640];
    let stream = RngStream::new(3);
    let biases: Vec<f64> = ns
        .iter()
        .map(|&n| exact - mc_bias_estimate(&p, &[1.0], &spec, n, 50_000, &stream.derive(n as u64)).unwrap().mean)
        .collect();
    let xs: Vec<f64> = ns.iter().map(|&n| n as f64).collect();
    let slope = if biases.iter().all(|&v| v > 0.0) {
        loglog_slope(&xs, &biases)
    } else {
        f64::NAN
    };
    ok &= (-1.3..=-0.7).contains(&slope);
    detail += &format!("; chi2_pen MC slope {slope:.3}");
    report(3, ok, &detail, start.elapsed(), Duration::from_secs(120));
}

#[test]
fn criterion_4_variance_scaling() {
    let start = Instant::now();
    let (lambda, b, g) = (1.0, 1.0, 1.0);
    let spec = RobustSpec::Chi2Pen { lambda };
    let p = bernoulli_linear(0.5, b, 1.0).unwrap();
    let stream = RngStream::new(4);
    let ns = [10usize, 20, 40, 80];
    let vars: Vec<f64> = ns
        .iter()
        .map(|&n| {
            let grads: Vec<Vec<f64>> = (0..100_000)
                .into_par_iter()
                .map(|r| minibatch_estimate(&p, &[1.0], &spec, n, &mut stream.derive(n as u64).derive(r)).unwrap().grad)
                .collect();
            trace_variance(&grads)
        })
        .collect();
    let mut ok = true;
    let mut detail = String::from("var");
    for (&n, &v) in ns.iter().zip(&vars) {
        let bound = 8.0 * (1.0 + b / lambda) * g * g / n as f64;
        ok &= v <= bound;
        detail += &format!(" n={n}:{v:.3e}(<= {bound:.3})");
    }
    let ratios: Vec<f64> = vars.windows(2).map(|w| w[0] / w[1]).collect();
    ok &= ratios.iter().all(|r| (1.6..=2.4).contains(r));
    detail += &format!("; ratios {ratios:.3?}");
    report(4, ok, &detail, start.elapsed(), Duration::from_secs(120));
}

/// `E‖M‖²` stratified over levels: `Σ_j P(J=j) E[‖M‖² | J=j]`.
fn stratified_second_moment(
    p: &dyn Problem,
    x: &[f64],
    spec: &RobustSpec,
    cfg: &MlmcConfig,
    reps: u64,
    stream: &RngStream,
) -> f64 {
    (1..=cfg.j_max())
        .map(|j| {
            let level = stream.derive(u64::from(j));
            let sq: Vec<f64> = (0..reps)
                .into_par_iter()
                .map(|r| {
                    let out =
                        mlmc_level_estimate(p, x, spec, cfg, MlmcTarget::Grad, j, &mut level.derive(r)).unwrap();
                    out.grad.iter().map(|v| v * v).sum()
                })
                .collect();
            level_probability(cfg, j) * mean_stderr(&sq).mean
        })
        .sum()
}

fn moment_slope(spec: &RobustSpec, x: f64, n0: usize, build: impl Fn(usize) -> Box<dyn Problem>, seed: u64) -> f64 {
    let caps: Vec<usize> = (4..=10).map(|k| n0 << k).collect();
    let stream = RngStream::new(seed);
    let moments: Vec<f64> = caps
        .iter()
        .map(|&n| {
            let cfg = MlmcConfig::new(n0, n).unwrap();
            stratified_second_moment(build(n).as_ref(), &[x], spec, &cfg, 4_000, &stream.derive(n as u64))
        })
        .collect();
    let xs: Vec<f64> = caps.iter().map(|&n| n as f64).collect();
    loglog_slope(&xs, &moments)
}

#[test]
fn criterion_5_mlmc_contract() {
    let start = Instant::now();
    let cfg = MlmcConfig::new(10, 160).unwrap();
    let expected_cost = 10.0 * (1.0 + (160.0f64 / 10.0).log2());
    let mut ok = true;
    let mut detail = String::new();
    for (spec, p0) in [(RobustSpec::Cvar { alpha: 0.1 }, 0.1), (RobustSpec::Chi2Pen { lambda: 0.5 }, 0.3)] {
        let p = bernoulli_linear(p0, 1.0, 1.0).unwrap();
        let stream = RngStream::new(5);
        let runs: Vec<(f64, f64)> = (0..100_000u64)
            .into_par_iter()
            .map(|r| {
                let out = mlmc_estimate(&p, &[1.0], &spec, &cfg, MlmcTarget::Value, &mut stream.derive(r)).unwrap();
                (out.value_estimate, out.grad_evals as f64)
            })
            .collect();
        let values = mean_stderr(&runs.iter().map(|r| r.0).collect::<Vec<_>>());
        let costs = mean_stderr(&runs.iter().map(|r| r.1).collect::<Vec<_>>());
        let truth = bernoulli_surrogate(&spec, p0, 160, 1.0).unwrap();
        let gap = (values.mean - truth).abs() / values.stderr;
        let cost_gap = (costs.mean - expected_cost).abs() / costs.stderr;
        ok &= gap <= 3.0 && cost_gap <= 3.0;
        detail += &format!(
            "{spec}: gap {gap:.2} se, cost {:.2} ({cost_gap:.2} se from {expected_cost}); ",
            costs.mean
        );
    }
    for (spec, p0, n0) in [(RobustSpec::Cvar { alpha: 0.1 }, 0.1, 10), (RobustSpec::Chi2Pen { lambda: 0.5 }, 0.3, 10)] {
        let slope = moment_slope(&spec, 1.0, n0, |_| Box::new(bernoulli_linear(p0, 1.0, 1.0).unwrap()), 50);
        ok &= slope <= 0.2;
        detail += &format!("{spec} moment slope {slope:.3}; ");
    }
    let hard = RobustSpec::Chi2Con { rho: 1.0 };
    let slope = moment_slope(&hard, 0.0, 10, |n| Box::new(three_point_hard(1.0, 1.0, n).unwrap()), 51);
    ok &= slope >= 0.7;
    detail += &format!("three-point chi2_con moment slope {slope:.3}");
    report(5, ok, &detail, start.elapsed(), Duration::from_secs(300));
}

fn logistic_instance() -> impl Problem {
    synthetic_logistic(200, 5, 10.0, 0).unwrap()
}

/// Full-batch projected subgradient method, 10⁵ iterations.
fn full_batch_reference(p: &impl Problem, spec: &RobustSpec) -> (f64, u64) {
    let exact = ExactGradient::new(p.dim(), |x: &[f64]| full_batch_grad(p, x, spec).unwrap());
    let cfg = SgmConfig::new(0.1, 100_000)
        .with_radius(p.radius())
        .with_averaging(Averaging::Suffix(2));
    let (x, _) = run(&exact, p.initial_point(), &cfg, &RngStream::new(0)).unwrap();
    let budget = 100_000 * p.support().unwrap().len() as u64;
    (full_batch(p, &x, spec).unwrap().value, budget)
}

#[test]
fn criterion_6_optimization() {
    let start = Instant::now();
    let mut ok = true;
    let mut detail = String::from("le cam");
    let alpha = 0.1;
    let lecam = cvar_lecam(1.0, 1.0, alpha, 0.05, 1).unwrap();
    for seed in 0..5 {
        let obj = RobustObjective::new(&lecam, RobustSpec::Cvar { alpha }, EstimatorKind::Minibatch { n: 10 });
        let cfg = SgmConfig::new(0.01, 10_000)
            .with_radius(Some(1.0))
            .with_averaging(Averaging::Full);
        let (x, _) = run(&obj, vec![1.0], &cfg, &RngStream::new(seed)).unwrap();
        let gap = lecam.analytic_objective(x[0]) - lecam.analytic_min().1;
        ok &= gap <= 0.05;
        detail += &format!(" {gap:.4}");
    }

    let p = logistic_instance();
    let spec = RobustSpec::Chi2Con { rho: 1.0 };
    let (reference, budget) = full_batch_reference(&p, &spec);
    detail += &format!("; logistic ref {reference:.5}");
    let runs = [
        (10usize, "sgm", Momentum::None, 0.1),
        (10, "nesterov", Momentum::Constant(0.9), 0.03),
        (50, "sgm", Momentum::None, 0.3),
        (50, "nesterov", Momentum::Constant(0.9), 0.1),
    ];
    let results: Vec<Option<u64>> = runs
        .par_iter()
        .map(|&(n, _, momentum, step)| {
            let obj = RobustObjective::new(&p, spec, EstimatorKind::Minibatch { n });
            let cfg = SgmConfig::new(step, (budget / 5) as usize / n)
                .with_radius(p.radius())
                .with_momentum(momentum);
            let (_, trace) = run(&obj, p.initial_point(), &cfg, &RngStream::new(6)).unwrap();
            trace.first_within(reference, 0.02).map(|r| r.grad_evals)
        })
        .collect();
    for (&(n, name, _, _), evals) in runs.iter().zip(&results) {
        ok &= evals.is_some_and(|e| e <= budget / 5);
        detail += &format!(" {name} n={n}: {evals:?}/{budget}");
    }
    report(6, ok, &detail, start.elapsed(), Duration::from_secs(300));
}

#[test]
fn criterion_7_doubling() {
    let start = Instant::now();
    let p = logistic_instance();
    let (rho, eps) = (1.0, 0.05);
    let spec = RobustSpec::Chi2Con { rho };
    let (reference, _) = full_batch_reference(&p, &spec);
    let b = p.bound_b().unwrap();
    let k = ((2.0 * b / eps).log2().ceil() as usize) - 1;
    let mut ok = true;
    let mut detail = format!("ref {reference:.5}, K = {k}:");
    for seed in 0..5 {
        let cfg = DoublingConfig::new(rho, eps, b, default_sgm(1.0, 5_000, p.radius()), MlmcConfig::new(10, 160).unwrap());
        let (x, rep) = doubling_minimize(&p, &cfg, &RngStream::new(seed)).unwrap();
        let gap = full_batch(&p, &x, &spec).unwrap().value - reference;
        ok &= gap <= 2.0 * eps && rep.intervals.len() == k;
        detail += &format!(" gap {gap:.4} ({} intervals)", rep.intervals.len());
    }
    report(7, ok, &detail, start.elapsed(), Duration::from_secs(300));
}

#[test]
fn criterion_8_gradient_sanity() {
    let start = Instant::now();
    let p = logistic_instance();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let n = rng.gen_range(5..=50);
        let atoms: Vec<usize> = (0..n).map(|_| rng.gen_range(0..200)).collect();
        let x: Vec<f64> = (0..5).map(|_| rng.gen_range(-3.0..3.0)).collect();
        for spec in [
            RobustSpec::KlCvar {
                alpha: rng.gen_range(0.2..1.0),
                lambda: rng.gen_range(0.2..2.0),
            },
            RobustSpec::Chi2Pen {
                lambda: rng.gen_range(0.2..2.0),
            },
        ] {
            let batch = evaluate_batch(&p, &x, &atoms, true).unwrap();
            let analytic = robust_grad_from_inner(&batch, &solve(&batch, &spec).unwrap()).unwrap();
            let f = |y: &[f64]| solve(&evaluate_batch(&p, y, &atoms, false).unwrap(), &spec).unwrap().value;
            let numeric = finite_diff_grad(f, &x, 1e-6);
            let diff: f64 = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let scale: f64 = numeric.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-8);
            worst = worst.max(diff / scale);
        }
    }
    report(
        8,
        worst <= 1e-5,
        &format!("100 gradients, max relative error {worst:.2e}"),
        start.elapsed(),
        Duration::from_secs(30),
    );
}

#[test]
fn criterion_9_determinism() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    fs::write(
        &config,
        r#"{"seed": 9,
            "problem": {"type": "synthetic_logistic", "n": 200, "d": 5, "radius": 10.0},
            "objective": {"kind": "chi2_con", "rho": 1.0},
            "estimator": {"type": "minibatch", "n": 10},
            "optimizer": {"type": "nesterov", "step_size": 0.03, "iterations": 2000, "momentum": 0.9}}"#,
    )
    .unwrap();
    let outputs: Vec<Vec<u8>> = ["a", "b"]
        .iter()
        .map(|sub| {
            let out = dir.path().join(sub);
            let code = dro::cli::main_from_args([
                "dro",
                "run",
                "--config",
                config.to_str().unwrap(),
                "--out",
                out.to_str().unwrap(),
            ]);
            assert_eq!(code, 0);
            fs::read(out.join("trace.csv")).unwrap()
        })
        .collect();
    let same = outputs[0] == outputs[1] && !outputs[0].is_empty();
    report(
        9,
        same,
        &format!("two runs, {} bytes each, identical = {same}", outputs[0].len()),
        start.elapsed(),
        Duration::from_secs(60),
    );
}
