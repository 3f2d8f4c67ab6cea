//! Self-check suite behind `dro verify`: each named check compares the
//! solvers and estimators against an independent oracle.

use crate::batch::LossBatch;
use crate::doubling::lambda_intervals;
use crate::error::Result;
use crate::estimators::{level_distribution, mlmc_estimate, EstimatorKind, MlmcConfig, MlmcTarget};
use crate::inner::{dual_value, lambda_derivative, solve, InnerSolution};
use crate::objective::RobustSpec;
use crate::optim::{project_ball, run_sgm, suffix_average, RobustObjective, SgmConfig};
use crate::oracle::{bernoulli_cvar_surrogate, bernoulli_surrogate, full_batch, simplex_grid_max};
use crate::problems::{bernoulli_linear, cvar_lecam};
use crate::rng::RngStream;
use crate::stats::mean_stderr;
use crate::weights::{chi2_divergence, chi2_divergence_from, kl_divergence, Weights};

/// Knobs for the suite. `perturb_inner` adds a constant to every inner
/// solver value seen by the checks, to confirm the suite can fail.
#[derive(Debug, Clone, Copy, Default)]
pub struct VerifyOptions {
    pub perturb_inner: f64,
}

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

type Check = fn(&VerifyOptions) -> Result<(bool, String)>;

const CHECKS: &[(&str, Check)] = &[
    ("divergence_examples", divergence_examples),
    ("cvar_examples", cvar_examples),
    ("kl_cvar_examples", kl_cvar_examples),
    ("chi2_pen_examples", chi2_pen_examples),
    ("chi2_con_examples", chi2_con_examples),
    ("grid_oracle_equivalence", grid_oracle_equivalence),
    ("primal_dual_consistency", primal_dual_consistency),
    ("monotonicity", monotonicity),
    ("chi2_boundedness", chi2_boundedness),
    ("lambda_derivative", lambda_derivative_check),
    ("mlmc_level_distribution", mlmc_levels),
    ("mlmc_unbiased", mlmc_unbiased),
    ("bias_sign", bias_sign),
    ("cvar_bias_bounds", cvar_bias_bounds),
    ("projection_and_averaging", projection_and_averaging),
    ("sgm_cvar_hard_instance", sgm_lecam),
    ("lambda_intervals", intervals),
];

pub fn check_names() -> Vec<&'static str> {
    CHECKS.iter().map(|(n, _)| *n).collect()
}

pub fn run_suite(opts: &VerifyOptions) -> Vec<CheckResult> {
    CHECKS
        .iter()
        .map(|(name, check)| match check(opts) {
            Ok((passed, detail)) => CheckResult { name, passed, detail },
            Err(e) => CheckResult {
                name,
                passed: false,
                detail: format!("error: {e}"),
            },
        })
        .collect()
}

fn solved(batch: &LossBatch, spec: &RobustSpec, opts: &VerifyOptions) -> Result<InnerSolution> {
    let mut sol = solve(batch, spec)?;
    sol.value += opts.perturb_inner;
    Ok(sol)
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn batch(v: &[f64]) -> Result<LossBatch> {
    LossBatch::new(v.to_vec())
}

fn random_batch(stream: &mut RngStream, n: usize) -> Result<LossBatch> {
    LossBatch::new((0..n).map(|_| stream.uniform()).collect())
}

fn random_specs(stream: &mut RngStream) -> [RobustSpec; 4] {
    let alpha = 0.05 + 0.95 * stream.uniform();
    [
        RobustSpec::Cvar { alpha },
        RobustSpec::KlCvar {
            alpha,
            lambda: 0.05 + stream.uniform(),
        },
        RobustSpec::Chi2Pen {
            lambda: 0.05 + stream.uniform(),
        },
        RobustSpec::Chi2Con {
            rho: 2.0 * stream.uniform(),
        },
    ]
}

fn divergence_examples(_: &VerifyOptions) -> Result<(bool, String)> {
    let q = Weights::new(vec![0.75, 0.25])?;
    let e1 = Weights::point_mass(2, 0)?;
    let ok = close(chi2_divergence(&q), 0.125, 1e-15)
        && close(chi2_divergence(&e1), 0.5, 1e-15)
        && close(kl_divergence(&e1), std::f64::consts::LN_2, 1e-15)
        && chi2_divergence(&Weights::uniform(7)?) == 0.0;
    Ok((ok, format!("chi2([.75,.25]) = {}", chi2_divergence(&q))))
}

fn cvar_examples(o: &VerifyOptions) -> Result<(bool, String)> {
    let b = batch(&[3.0, 1.0, 2.0])?;
    let v: Vec<f64> = [1.0 / 3.0, 1.0, 0.5]
        .iter()
        .map(|&alpha| solved(&b, &RobustSpec::Cvar { alpha }, o).map(|s| s.value))
        .collect::<Result<_>>()?;
    let ok = close(v[0], 3.0, 1e-12) && close(v[1], 2.0, 1e-12) && close(v[2], 8.0 / 3.0, 1e-12);
    Ok((ok, format!("values {v:?}")))
}

fn kl_cvar_examples(o: &VerifyOptions) -> Result<(bool, String)> {
    let v = solved(&batch(&[1.0, 0.0])?, &RobustSpec::KlCvar { alpha: 0.5, lambda: 1.0 }, o)?.value;
    let expected = ((1f64.exp() + 1.0) / 2.0).ln();
    Ok((close(v, expected, 1e-10), format!("{v} vs {expected}")))
}

fn chi2_pen_examples(o: &VerifyOptions) -> Result<(bool, String)> {
    let b = batch(&[1.0, 0.0])?;
    let a = solved(&b, &RobustSpec::Chi2Pen { lambda: 1.0 }, o)?;
    let c = solved(&b, &RobustSpec::Chi2Pen { lambda: 0.25 }, o)?;
    let ok = close(a.value, 0.625, 1e-12) && close(a.eta, -0.5, 1e-12) && close(c.value, 0.875, 1e-12);
    Ok((ok, format!("values {} and {}", a.value, c.value)))
}

fn chi2_con_examples(o: &VerifyOptions) -> Result<(bool, String)> {
    let b = batch(&[1.0, 0.0])?;
    let a = solved(&b, &RobustSpec::Chi2Con { rho: 0.5 }, o)?.value;
    let c = solved(&b, &RobustSpec::Chi2Con { rho: 0.125 }, o)?.value;
    Ok((close(a, 1.0, 1e-12) && close(c, 0.75, 1e-12), format!("values {a} and {c}")))
}

fn grid_oracle_equivalence(o: &VerifyOptions) -> Result<(bool, String)> {
    let mut stream = RngStream::new(11);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let b = random_batch(&mut stream, 3)?;
        for spec in random_specs(&mut stream) {
            let v = solved(&b, &spec, o)?.value;
            let g = simplex_grid_max(b.values(), &spec, 2e-3)?;
            worst = worst.max((v - g).abs());
        }
    }
    Ok((worst <= 5e-3, format!("max |solver - grid| = {worst:.2e}")))
}

fn primal_dual_consistency(o: &VerifyOptions) -> Result<(bool, String)> {
    let mut stream = RngStream::new(12);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let n = 1 + stream.below(100);
        let b = random_batch(&mut stream, n)?;
        for spec in random_specs(&mut stream) {
            let s = solved(&b, &spec, o)?;
            worst = worst.max((s.value - dual_value(&b, &spec, s.eta)).abs());
        }
    }
    Ok((worst <= 1e-7, format!("max |primal - dual| = {worst:.2e}")))
}

fn monotonicity(o: &VerifyOptions) -> Result<(bool, String)> {
    let b = batch(&[0.9, 0.1, 0.5, 0.45, 0.2, 0.8, 0.33])?;
    let series = |specs: Vec<RobustSpec>| -> Result<Vec<f64>> { specs.iter().map(|s| solved(&b, s, o).map(|x| x.value)).collect() };
    let grid: Vec<f64> = (1..=20).map(|k| k as f64 / 20.0).collect();
    let con = series(grid.iter().map(|&r| RobustSpec::Chi2Con { rho: 2.0 * r }).collect())?;
    let pen = series(grid.iter().map(|&l| RobustSpec::Chi2Pen { lambda: l }).collect())?;
    let kl = series(grid.iter().map(|&l| RobustSpec::KlCvar { alpha: 0.3, lambda: l }).collect())?;
    let cvar = series(grid.iter().map(|&a| RobustSpec::Cvar { alpha: a }).collect())?;
    let up = |v: &[f64]| v.windows(2).all(|w| w[1] >= w[0] - 1e-12);
    let down = |v: &[f64]| v.windows(2).all(|w| w[1] <= w[0] + 1e-12);
    let mean = b.mean();
    let max = b.max();
    let dom = con.iter().chain(&cvar).all(|&v| v >= mean - 1e-12 && v <= max + 1e-12);
    Ok((up(&con) && down(&pen) && down(&kl) && down(&cvar) && dom, "ρ↑, λ↓, α↓, mean ≤ value ≤ max".into()))
}

fn chi2_boundedness(_: &VerifyOptions) -> Result<(bool, String)> {
    let mut stream = RngStream::new(13);
    let mut ok = true;
    for _ in 0..100 {
        let n = 2 + stream.below(60);
        let b = random_batch(&mut stream, n)?;
        for spec in random_specs(&mut stream) {
            let s = solve(&b, &spec)?;
            let d = chi2_divergence_from(s.weights.as_slice(), None);
            ok &= d <= spec.chi2_bound(1.0) + 1e-8;
        }
    }
    Ok((ok, "D(q*) within the χ²-bound of each objective".into()))
}

fn lambda_derivative_check(_: &VerifyOptions) -> Result<(bool, String)> {
    let b = batch(&[0.9, 0.1, 0.5, 0.45, 0.2, 0.8])?;
    let mut worst = 0.0f64;
    for lambda in [0.05, 0.2, 0.7, 2.0] {
        let h = 1e-6;
        let f = |l: f64| solve(&b, &RobustSpec::Chi2Pen { lambda: l }).map(|s| s.value);
        let fd = (f(lambda + h)? - f(lambda - h)?) / (2.0 * h);
        worst = worst.max((lambda_derivative(&b, lambda)? - fd).abs());
    }
    Ok((worst <= 1e-6, format!("max |analytic - fd| = {worst:.2e}")))
}

fn mlmc_levels(_: &VerifyOptions) -> Result<(bool, String)> {
    let cfg = MlmcConfig::new(1, 8)?;
    let ok = level_distribution(&cfg) == vec![(1, 0.5), (2, 0.25), (3, 0.25)]
        && MlmcConfig::new(10, 160)?.expected_cost() == 50.0;
    Ok((ok, "q(j) = 2^{-j + 1{j = j_max}}".into()))
}

fn mlmc_unbiased(_: &VerifyOptions) -> Result<(bool, String)> {
    let alpha = 0.2;
    let p = bernoulli_linear(alpha, 1.0, 1.0)?;
    let spec = RobustSpec::Cvar { alpha };
    let cfg = MlmcConfig::new(5, 40)?;
    let root = RngStream::new(14);
    let mut vals = Vec::with_capacity(20_000);
    let mut cost = Vec::with_capacity(20_000);
    for r in 0..20_000u64 {
        let out = mlmc_estimate(&p, &[1.0], &spec, &cfg, MlmcTarget::Value, &mut root.derive(r))?;
        vals.push(out.value_estimate);
        cost.push(out.grad_evals as f64);
    }
    let m = mean_stderr(&vals);
    let c = mean_stderr(&cost);
    let exact = bernoulli_cvar_surrogate(alpha, 40, 1.0)?;
    let ok = (m.mean - exact).abs() <= 3.0 * m.stderr && (c.mean - cfg.expected_cost()).abs() <= 3.0 * c.stderr;
    Ok((ok, format!("mean {:.4} ± {:.4} vs {exact:.4}; cost {:.2}", m.mean, m.stderr, c.mean)))
}

fn bias_sign(o: &VerifyOptions) -> Result<(bool, String)> {
    let p0 = 0.3;
    let p = bernoulli_linear(p0, 1.0, 1.0)?;
    let specs = [
        RobustSpec::Cvar { alpha: 0.2 },
        RobustSpec::KlCvar { alpha: 0.2, lambda: 0.3 },
        RobustSpec::Chi2Pen { lambda: 0.3 },
        RobustSpec::Chi2Con { rho: 1.0 },
    ];
    let mut ok = true;
    for spec in specs {
        let exact = full_batch(&p, &[1.0], &spec)?.value + o.perturb_inner.min(0.0);
        for n in [5u64, 20, 80] {
            ok &= bernoulli_surrogate(&spec, p0, n, 1.0)? <= exact + 1e-12;
        }
    }
    Ok((ok, "surrogate ≤ population value for every objective".into()))
}

fn cvar_bias_bounds(_: &VerifyOptions) -> Result<(bool, String)> {
    let alpha: f64 = 0.1;
    let mut ok = true;
    for n in [10u64, 100, 1000, 10_000] {
        let bias = 1.0 - bernoulli_cvar_surrogate(alpha, n, 1.0)?;
        let scale = 1.0 / (alpha * n as f64).sqrt();
        ok &= bias >= 0.05 * (1.0 - alpha).sqrt() * scale && bias <= 3.0 * scale;
    }
    Ok((ok, "c√(1-α)/√(αn) ≤ bias ≤ 3/√(αn)".into()))
}

fn projection_and_averaging(_: &VerifyOptions) -> Result<(bool, String)> {
    let p = project_ball(&[3.0, 4.0], 1.0);
    let its: Vec<Vec<f64>> = (1..=9).map(|v| vec![v as f64]).collect();
    let ok = close(p[0], 0.6, 1e-15) && close(p[1], 0.8, 1e-15) && suffix_average(&its, 3) == vec![8.0];
    Ok((ok, "Π([3,4]) = [.6,.8], suffix mean 8".into()))
}

fn sgm_lecam(_: &VerifyOptions) -> Result<(bool, String)> {
    let p = cvar_lecam(1.0, 1.0, 0.1, 0.05, 1)?;
    let spec = RobustSpec::Cvar { alpha: 0.1 };
    let obj = RobustObjective::new(&p, spec, EstimatorKind::Minibatch { n: 10 });
    let cfg = SgmConfig::new(0.02, 3000)
        .with_radius(Some(1.0))
        .with_averaging(crate::optim::Averaging::Suffix(2));
    let (x, _) = run_sgm(&obj, vec![1.0], &cfg, &RngStream::new(15))?;
    let v = p.analytic_objective(x[0]);
    Ok((v <= 0.05, format!("L(x_out) = {v:.4}")))
}

fn intervals(_: &VerifyOptions) -> Result<(bool, String)> {
    let ok = lambda_intervals(1.0, 1.0, 0.25)? == vec![(0.5, 1.0), (0.25, 0.5)] && lambda_intervals(1.0, 1.0, 0.5)?.len() == 1;
    Ok((ok, "K = ⌈log2(2B/ε)⌉ - 1".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_and_is_large_enough() {
        assert!(check_names().len() >= 12);
        let results = run_suite(&VerifyOptions::default());
        for r in &results {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
    }

    #[test]
    fn perturbation_is_detected() {
        let results = run_suite(&VerifyOptions { perturb_inner: 1e-3 });
        assert!(results.iter().any(|r| !r.passed));
    }
}
