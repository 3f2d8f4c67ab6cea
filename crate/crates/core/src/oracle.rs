//! Independent ground truth for testing: exact full-batch objectives on
//! finite supports, brute-force search over the simplex, exact Bernoulli
//! surrogates and Monte Carlo measurement of bias and variance.

use rayon::prelude::*;
use statrs::distribution::{Binomial, Discrete};

use crate::batch::LossBatch;
use crate::error::{DroError, Result};
use crate::estimators::{minibatch_estimate, minibatch_value};
use crate::inner::{is_feasible, primal_value, robust_grad_from_inner, solve, InnerSolution};
use crate::objective::RobustSpec;
use crate::problems::{support_batch, Problem};
use crate::rng::RngStream;
use crate::stats::{mean_stderr, MeanStderr};

/// Exact `L(x; P0)` on a finite support; the atoms keep their probabilities.
pub fn full_batch<P: Problem + ?Sized>(problem: &P, x: &[f64], spec: &RobustSpec) -> Result<InnerSolution> {
    let batch = support_batch(problem, x, false)?;
    solve(&batch, spec)
}

/// Exact value and a subgradient of `L(·; P0)` at `x`.
pub fn full_batch_grad<P: Problem + ?Sized>(problem: &P, x: &[f64], spec: &RobustSpec) -> Result<(f64, Vec<f64>)> {
    let batch = support_batch(problem, x, true)?;
    let sol = solve(&batch, spec)?;
    Ok((sol.value, robust_grad_from_inner(&batch, &sol)?))
}

/// Largest primal objective over feasible grid points of the simplex with
/// spacing `resolution` (`n <= 4`).
pub fn simplex_grid_max(values: &[f64], spec: &RobustSpec, resolution: f64) -> Result<f64> {
    let n = values.len();
    if n == 0 || n > 4 {
        return Err(DroError::param("values", format!("grid search supports 1 to 4 samples, got {n}")));
    }
    if !(resolution > 0.0 && resolution <= 1.0) {
        return Err(DroError::param("resolution", "must lie in (0, 1]"));
    }
    let batch = LossBatch::new(values.to_vec())?;
    let steps = (1.0 / resolution).round() as usize;
    let mut best = f64::NEG_INFINITY;
    let mut counts = vec![0usize; n];
    let mut q = vec![0.0; n];
    // enumerate compositions of `steps` into n parts
    fn rec(
        i: usize,
        left: usize,
        steps: usize,
        counts: &mut [usize],
        q: &mut [f64],
        visit: &mut dyn FnMut(&[f64]),
    ) {
        let n = counts.len();
        if i == n - 1 {
            counts[i] = left;
            for (qj, &c) in q.iter_mut().zip(counts.iter()) {
                *qj = c as f64 / steps as f64;
            }
            visit(q);
            return;
        }
        for c in 0..=left {
            counts[i] = c;
            rec(i + 1, left - c, steps, counts, q, visit);
        }
    }
    rec(0, steps, steps, &mut counts, &mut q, &mut |q| {
        if is_feasible(&batch, spec, q, 1e-12) {
            best = best.max(primal_value(&batch, spec, q));
        }
    });
    Ok(best)
}

/// Exact surrogate `E L(S_1^n)` for CVaR at level `alpha` with
/// `S_i ~ Bernoulli(alpha)` and loss `B·S_i`:
/// `B · E min(1, Bin(n, α)/(αn))`.
pub fn bernoulli_cvar_surrogate(alpha: f64, n: u64, b: f64) -> Result<f64> {
    RobustSpec::cvar(alpha)?;
    bernoulli_surrogate(&RobustSpec::Cvar { alpha }, alpha, n, b)
}

/// Exact surrogate `E L(S_1^n)` for any objective with Bernoulli(`p0`)
/// samples and loss `B·S`. A batch with `k` ones is the two-atom
/// distribution `{B: k/n, 0: 1-k/n}`, so the expectation is a binomial sum of
/// weighted inner solves.
pub fn bernoulli_surrogate(spec: &RobustSpec, p0: f64, n: u64, b: f64) -> Result<f64> {
    if n == 0 || n > 1_000_000 {
        return Err(DroError::param("n", "must lie in 1..=1e6"));
    }
    let bin = Binomial::new(p0, n).map_err(|e| DroError::param("p0", e.to_string()))?;
    let mut total = 0.0;
    for k in 0..=n {
        let w = bin.pmf(k);
        if w < 1e-300 {
            continue;
        }
        total += w * bernoulli_batch_value(spec, k, n, b)?;
    }
    Ok(total)
}

/// Robust value of a batch of `n` Bernoulli losses with `k` ones.
pub fn bernoulli_batch_value(spec: &RobustSpec, k: u64, n: u64, b: f64) -> Result<f64> {
    if k == 0 {
        return Ok(0.0);
    }
    if k == n {
        return Ok(b);
    }
    let frac = k as f64 / n as f64;
    let batch = LossBatch::new(vec![b, 0.0])?.with_probs(vec![frac, 1.0 - frac])?;
    Ok(solve(&batch, spec)?.value)
}

/// Monte Carlo estimate of `L̄(x; n) = E L(x; S_1^n)` over `reps` batches.
/// Repetition `r` uses `stream.derive(r)`; results are reduced in order.
pub fn mc_bias_estimate<P: Problem + ?Sized>(
    problem: &P,
    x: &[f64],
    spec: &RobustSpec,
    n: usize,
    reps: usize,
    stream: &RngStream,
) -> Result<MeanStderr> {
    if reps < 2 {
        return Err(DroError::param("reps", "need at least 2 repetitions"));
    }
    let values: Vec<f64> = (0..reps)
        .into_par_iter()
        .map(|r| minibatch_value(problem, x, spec, n, &mut stream.derive(r as u64)))
        .collect::<Result<_>>()?;
    Ok(mean_stderr(&values))
}

/// Trace of the covariance of the mini-batch gradient at batch size `n`.
pub fn mc_variance_estimate<P: Problem + ?Sized>(
    problem: &P,
    x: &[f64],
    spec: &RobustSpec,
    n: usize,
    reps: usize,
    stream: &RngStream,
) -> Result<f64> {
    if reps < 2 {
        return Err(DroError::param("reps", "need at least 2 repetitions"));
    }
    let grads: Vec<Vec<f64>> = (0..reps)
        .into_par_iter()
        .map(|r| minibatch_estimate(problem, x, spec, n, &mut stream.derive(r as u64)).map(|o| o.grad))
        .collect::<Result<_>>()?;
    Ok(trace_variance(&grads))
}

/// `Σ_j Var(g_j)` with the unbiased estimator.
pub fn trace_variance(samples: &[Vec<f64>]) -> f64 {
    let d = samples.first().map_or(0, Vec::len);
    let n = samples.len() as f64;
    (0..d)
        .map(|j| {
            let mean = samples.iter().map(|g| g[j]).sum::<f64>() / n;
            samples.iter().map(|g| (g[j] - mean).powi(2)).sum::<f64>() / (n - 1.0)
        })
        .sum()
}

/// Central differences of `f` at `x` with step `h`.
pub fn finite_diff_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|j| {
            probe[j] = x[j] + h;
            let up = f(&probe);
            probe[j] = x[j] - h;
            let down = f(&probe);
            probe[j] = x[j];
            (up - down) / (2.0 * h)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{bernoulli_linear, point_mass};
    use approx::assert_abs_diff_eq;

    #[test]
    fn full_batch_examples() {
        let p = point_mass(vec![1.0], 2.0, None).unwrap();
        let (v, g) = full_batch_grad(&p, &[3.0], &RobustSpec::Cvar { alpha: 0.2 }).unwrap();
        assert_eq!((v, g), (4.0, vec![4.0]));

        let alpha = 0.1;
        let b = bernoulli_linear(alpha, 2.0, 1.0).unwrap();
        let sol = full_batch(&b, &[1.0], &RobustSpec::Cvar { alpha }).unwrap();
        assert_abs_diff_eq!(sol.value, 2.0, epsilon = 1e-12);

        let b = bernoulli_linear(0.5, 1.0, 1.0).unwrap();
        let sol = full_batch(&b, &[1.0], &RobustSpec::Chi2Pen { lambda: 1.0 }).unwrap();
        assert_abs_diff_eq!(sol.value, 0.625, epsilon = 1e-12);
    }

    #[test]
    fn grid_examples() {
        let cvar = RobustSpec::Cvar { alpha: 1.0 };
        assert_abs_diff_eq!(simplex_grid_max(&[1.0, 0.0], &cvar, 1e-3).unwrap(), 0.5, epsilon = 1e-12);
        let con = RobustSpec::Chi2Con { rho: 0.125 };
        assert_abs_diff_eq!(simplex_grid_max(&[1.0, 0.0], &con, 1e-3).unwrap(), 0.75, epsilon = 2e-3);
        assert!(simplex_grid_max(&[0.0; 5], &con, 0.1).is_err());
    }

    #[test]
    fn bernoulli_surrogate_examples() {
        assert_abs_diff_eq!(bernoulli_cvar_surrogate(0.5, 2, 1.0).unwrap(), 0.75, epsilon = 1e-12);
        assert_abs_diff_eq!(bernoulli_cvar_surrogate(0.5, 2, 3.0).unwrap(), 2.25, epsilon = 1e-12);
        // closed form B E min(1, K/(αn))
        let (alpha, n) = (0.1, 50u64);
        let bin = Binomial::new(alpha, n).unwrap();
        let direct: f64 = (0..=n).map(|k| bin.pmf(k) * (k as f64 / (alpha * n as f64)).min(1.0)).sum();
        assert_abs_diff_eq!(bernoulli_cvar_surrogate(alpha, n, 1.0).unwrap(), direct, epsilon = 1e-12);
    }

    #[test]
    fn bernoulli_surrogate_increases_with_n() {
        for alpha in [0.05, 0.1, 0.3] {
            let mut prev = 0.0;
            for n in [10u64, 20, 40, 80, 160, 320] {
                let v = bernoulli_cvar_surrogate(alpha, n, 1.0).unwrap();
                assert!(v >= prev - 1e-12 && v <= 1.0);
                prev = v;
            }
        }
    }

    #[test]
    fn mc_matches_exact_bernoulli() {
        let alpha = 0.2;
        let p = bernoulli_linear(alpha, 1.0, 1.0).unwrap();
        let spec = RobustSpec::Cvar { alpha };
        let m = mc_bias_estimate(&p, &[1.0], &spec, 20, 20_000, &RngStream::new(4)).unwrap();
        let exact = bernoulli_cvar_surrogate(alpha, 20, 1.0).unwrap();
        assert!((m.mean - exact).abs() <= 3.0 * m.stderr + 1e-12, "{m:?} vs {exact}");
    }

    #[test]
    fn deterministic_problem_has_no_bias_or_variance() {
        let p = point_mass(vec![0.0, 1.0], 1.0, None).unwrap();
        let spec = RobustSpec::Chi2Con { rho: 1.0 };
        let m = mc_bias_estimate(&p, &[1.0, 1.0], &spec, 5, 50, &RngStream::new(0)).unwrap();
        assert_eq!(m.stderr, 0.0);
        assert_eq!(m.mean, 0.5);
        assert_eq!(mc_variance_estimate(&p, &[1.0, 1.0], &spec, 5, 50, &RngStream::new(0)).unwrap(), 0.0);
    }

    #[test]
    fn finite_differences() {
        let g = finite_diff_grad(|x| x.iter().sum(), &[1.0, 2.0], 1e-6);
        for v in g {
            assert_abs_diff_eq!(v, 1.0, epsilon = 1e-9);
        }
        let g = finite_diff_grad(|x| x.iter().map(|v| v * v).sum(), &[1.0, -2.0], 1e-5);
        assert_abs_diff_eq!(g[0], 2.0, epsilon = 1e-8);
        assert_abs_diff_eq!(g[1], -4.0, epsilon = 1e-8);
    }
}
