//! The λ-doubling scheme for the χ²-constrained objective.
//!
//! The constrained loss is the infimum over `λ >= 0` of
//! `f_ρ(x, λ) = L_pen^λ(x) + λρ`, which is jointly convex in `(x, λ)`. The
//! range `[ε/2ρ, B/ρ]` is covered by factor-2 intervals; on each one a joint
//! projected SGM in `(x, λ)` runs with MLMC estimates of both partial
//! gradients, and the interval whose result has the smallest estimated
//! `f_ρ` is selected.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{DroError, Result};
use crate::estimators::{minibatch_value, mlmc_estimate, MlmcConfig, MlmcTarget};
use crate::objective::RobustSpec;
use crate::optim::{Averager, Averaging, RunTrace, SgmConfig, TraceRecord};
use crate::oracle::full_batch;
use crate::problems::Problem;
use crate::rng::RngStream;
use crate::stats::median;

fn default_reps() -> usize {
    9
}

fn default_cap() -> usize {
    1_000_000
}

fn default_scale() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoublingConfig {
    pub rho: f64,
    pub epsilon: f64,
    /// Loss bound `B`.
    pub bound_b: f64,
    /// Step size, iteration count, averaging and radius for the `x` updates.
    pub sgm: SgmConfig,
    /// Step size for `λ`; by default `(hi - lo) / (√T (ρ + B/lo))`.
    #[serde(default)]
    pub lambda_step_size: Option<f64>,
    pub mlmc: MlmcConfig,
    #[serde(default = "default_reps")]
    pub selection_reps: usize,
    /// Selection batch is `min(⌈scale · B²/(λ ε²)⌉, cap)`.
    #[serde(default = "default_scale")]
    pub selection_batch_scale: f64,
    #[serde(default = "default_cap")]
    pub selection_batch_cap: usize,
}

impl DoublingConfig {
    pub fn new(rho: f64, epsilon: f64, bound_b: f64, sgm: SgmConfig, mlmc: MlmcConfig) -> Self {
        Self {
            rho,
            epsilon,
            bound_b,
            sgm,
            lambda_step_size: None,
            mlmc,
            selection_reps: default_reps(),
            selection_batch_scale: default_scale(),
            selection_batch_cap: default_cap(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(DroError::param("rho", "must be positive"));
        }
        if !(self.epsilon > 0.0 && self.epsilon < self.bound_b) {
            return Err(DroError::param("epsilon", format!("must lie in (0, B) with B = {}", self.bound_b)));
        }
        if self.selection_reps == 0 {
            return Err(DroError::param("selection_reps", "must be at least 1"));
        }
        self.sgm.validate()
    }
}

/// Intervals `[λ^(i+1), λ^(i)]` with `λ^(i) = (B/ρ) 2^{-i+1}`, for
/// `i = 1..=K` and `K = ⌈log2(2B/ε)⌉ - 1`.
pub fn lambda_intervals(b: f64, rho: f64, epsilon: f64) -> Result<Vec<(f64, f64)>> {
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(DroError::param("rho", "must be positive"));
    }
    if !(b > 0.0 && epsilon > 0.0 && epsilon < b) {
        return Err(DroError::param("epsilon", format!("must lie in (0, B), got {epsilon} with B = {b}")));
    }
    let k = ((2.0 * b / epsilon).log2() - 1e-12).ceil() as i32 - 1;
    Ok((1..=k)
        .map(|i| {
            let hi = b / rho * 2f64.powi(1 - i);
            (hi / 2.0, hi)
        })
        .collect())
}

/// Output of the joint `(x, λ)` run on one interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointResult {
    pub x_bar: Vec<f64>,
    pub lambda_hat: f64,
    pub grad_evals: u64,
    pub trace: RunTrace,
}

/// Projected SGM on `f_ρ(x, λ)` over `X × [lo, hi]`. The `x` step uses the
/// MLMC gradient of `L_pen^λ`, the `λ` step the MLMC estimate of
/// `∂_λ L_pen^λ + ρ`. Trace values are exact `f_ρ` at the averaged point when
/// the problem has finite support.
pub fn joint_xlambda_sgm<P: Problem + ?Sized>(
    problem: &P,
    interval: (f64, f64),
    cfg: &DoublingConfig,
    stream: &RngStream,
) -> Result<JointResult> {
    let (lo, hi) = interval;
    if !(lo > 0.0 && hi >= lo) {
        return Err(DroError::param("interval", format!("need 0 < lo <= hi, got [{lo}, {hi}]")));
    }
    let sgm = &cfg.sgm;
    sgm.validate()?;
    let t_total = sgm.iterations;
    let lambda_step = cfg
        .lambda_step_size
        .unwrap_or((hi - lo) / ((t_total as f64).sqrt() * (cfg.rho + cfg.bound_b / lo)));
    let mut x = problem.initial_point();
    if let Some(r) = sgm.radius {
        crate::optim::project_ball_in_place(&mut x, r);
    }
    let mut lambda = (lo * hi).sqrt();
    let mut x_avg = Averager::new(sgm.averaging, t_total, x.len());
    let mut l_avg = Averager::new(sgm.averaging, t_total, 1);
    let every = (t_total / sgm.eval_points.max(1)).max(1);
    let mut trace = RunTrace::default();
    let mut evals = 0u64;
    for t in 1..=t_total {
        let spec = RobustSpec::Chi2Pen { lambda };
        let out = mlmc_estimate(problem, &x, &spec, &cfg.mlmc, MlmcTarget::LambdaDeriv, &mut stream.derive(t as u64))?;
        evals += out.grad_evals;
        if out.grad.iter().any(|g| !g.is_finite()) || !out.value_estimate.is_finite() {
            return Err(DroError::NonFinite {
                iteration: t,
                what: "joint (x, λ) gradient".into(),
            });
        }
        for (xi, g) in x.iter_mut().zip(&out.grad) {
            *xi -= sgm.step_size * g;
        }
        if let Some(r) = sgm.radius {
            crate::optim::project_ball_in_place(&mut x, r);
        }
        lambda = (lambda - lambda_step * (out.value_estimate + cfg.rho)).clamp(lo, hi);
        x_avg.push(t, &x);
        l_avg.push(t, &[lambda]);
        if t % every == 0 || t == t_total {
            let xb = x_avg.output(&x);
            let lb = l_avg.output(std::slice::from_ref(&lambda))[0];
            let value = full_batch(problem, xb, &RobustSpec::Chi2Pen { lambda: lb })
                .map(|s| s.value + lb * cfg.rho)
                .unwrap_or(f64::NAN);
            trace.records.push(TraceRecord {
                iter: t,
                grad_evals: evals,
                value,
                step_size: sgm.step_size,
                wall_ms: 0,
            });
        }
    }
    Ok(JointResult {
        x_bar: x_avg.output(&x).to_vec(),
        lambda_hat: l_avg.output(&[lambda])[0],
        grad_evals: evals,
        trace,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalReport {
    pub index: usize,
    pub lo: f64,
    pub hi: f64,
    pub x_bar: Vec<f64>,
    pub lambda_hat: f64,
    /// Median-of-repeats estimate of `f_ρ(x_bar, λ_hat)`.
    pub estimate: f64,
    pub selection_batch: usize,
    pub grad_evals: u64,
    pub value_evals: u64,
    pub trace: RunTrace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoublingReport {
    pub intervals: Vec<IntervalReport>,
    pub selected: usize,
    pub total_grad_evals: u64,
    pub total_value_evals: u64,
}

/// Runs [`joint_xlambda_sgm`] on every interval of [`lambda_intervals`] and
/// returns the averaged `x` of the interval with the smallest estimated
/// `f_ρ`. Interval `i` uses `stream.derive(i)`.
pub fn doubling_minimize<P: Problem + ?Sized>(
    problem: &P,
    cfg: &DoublingConfig,
    stream: &RngStream,
) -> Result<(Vec<f64>, DoublingReport)> {
    cfg.validate()?;
    let intervals = lambda_intervals(cfg.bound_b, cfg.rho, cfg.epsilon)?;
    let reports: Vec<IntervalReport> = intervals
        .par_iter()
        .enumerate()
        .map(|(i, &(lo, hi))| -> Result<IntervalReport> {
            let sub = stream.derive(i as u64);
            let joint = joint_xlambda_sgm(problem, (lo, hi), cfg, &sub.derive(0))?;
            let batch = ((cfg.selection_batch_scale * cfg.bound_b.powi(2) / (hi * cfg.epsilon.powi(2))).ceil() as usize)
                .clamp(1, cfg.selection_batch_cap);
            let spec = RobustSpec::Chi2Pen {
                lambda: joint.lambda_hat,
            };
            let sel = sub.derive(1);
            let estimates: Vec<f64> = (0..cfg.selection_reps)
                .map(|r| {
                    minibatch_value(problem, &joint.x_bar, &spec, batch, &mut sel.derive(r as u64))
                        .map(|v| v + joint.lambda_hat * cfg.rho)
                })
                .collect::<Result<_>>()?;
            Ok(IntervalReport {
                index: i + 1,
                lo,
                hi,
                x_bar: joint.x_bar,
                lambda_hat: joint.lambda_hat,
                estimate: median(&estimates),
                selection_batch: batch,
                grad_evals: joint.grad_evals,
                value_evals: (batch * cfg.selection_reps) as u64,
                trace: joint.trace,
            })
        })
        .collect::<Result<_>>()?;
    let selected = reports
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.estimate.total_cmp(&b.1.estimate))
        .map(|(i, _)| i)
        .ok_or_else(|| DroError::param("epsilon", "no λ intervals"))?;
    let report = DoublingReport {
        total_grad_evals: reports.iter().map(|r| r.grad_evals).sum(),
        total_value_evals: reports.iter().map(|r| r.value_evals).sum(),
        selected,
        intervals: reports,
    };
    Ok((report.intervals[selected].x_bar.clone(), report))
}

/// Default configuration: averaging over the full run.
pub fn default_sgm(step_size: f64, iterations: usize, radius: Option<f64>) -> SgmConfig {
    SgmConfig::new(step_size, iterations)
        .with_averaging(Averaging::Full)
        .with_radius(radius)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{bernoulli_linear, FiniteSupport};
    use approx::assert_abs_diff_eq;

    #[test]
    fn interval_examples() {
        assert_eq!(lambda_intervals(1.0, 1.0, 0.25).unwrap(), vec![(0.5, 1.0), (0.25, 0.5)]);
        assert_eq!(lambda_intervals(1.0, 1.0, 0.5).unwrap(), vec![(0.5, 1.0)]);
        let a = lambda_intervals(1.0, 1.0, 0.1).unwrap();
        let b = lambda_intervals(1.0, 2.0, 0.1).unwrap();
        for ((a0, a1), (b0, b1)) in a.iter().zip(&b) {
            assert_abs_diff_eq!(*b0, a0 / 2.0, epsilon = 1e-15);
            assert_abs_diff_eq!(*b1, a1 / 2.0, epsilon = 1e-15);
        }
        assert!(lambda_intervals(1.0, 1.0, 1.0).is_err());
        assert_eq!(lambda_intervals(5.0, 1.0, 0.05).unwrap().len(), 7);
    }

    /// Two atoms with losses `{B, 0}`; `x` does not matter.
    struct TwoAtom {
        support: FiniteSupport,
    }

    impl Problem for TwoAtom {
        fn name(&self) -> &str {
            "two_atom"
        }
        fn dim(&self) -> usize {
            1
        }
        fn radius(&self) -> Option<f64> {
            Some(1.0)
        }
        fn bound_b(&self) -> Option<f64> {
            Some(1.0)
        }
        fn bound_g(&self) -> Option<f64> {
            Some(0.0)
        }
        fn support(&self) -> Option<&FiniteSupport> {
            Some(&self.support)
        }
        fn loss(&self, _x: &[f64], s: usize) -> f64 {
            s as f64
        }
        fn loss_grad(&self, _x: &[f64], s: usize, out: &mut [f64]) -> f64 {
            out[0] = 0.0;
            s as f64
        }
    }

    fn cfg(rho: f64) -> DoublingConfig {
        DoublingConfig::new(
            rho,
            0.1,
            1.0,
            default_sgm(0.1, 4000, Some(1.0)),
            MlmcConfig::new(4, 64).unwrap(),
        )
    }

    #[test]
    fn slack_constraint_drives_lambda_to_lo() {
        let p = TwoAtom {
            support: FiniteSupport::new(vec![0.7, 0.3]).unwrap(),
        };
        let r = joint_xlambda_sgm(&p, (0.25, 0.5), &cfg(10.0), &RngStream::new(1)).unwrap();
        assert!(r.lambda_hat - 0.25 < 0.02, "{}", r.lambda_hat);
    }

    #[test]
    fn zero_radius_drives_lambda_to_hi() {
        let p = TwoAtom {
            support: FiniteSupport::new(vec![0.7, 0.3]).unwrap(),
        };
        let mut c = cfg(1.0);
        c.rho = 1e-9;
        let r = joint_xlambda_sgm(&p, (0.25, 0.5), &c, &RngStream::new(1)).unwrap();
        assert!(0.5 - r.lambda_hat < 0.02, "{}", r.lambda_hat);
    }

    #[test]
    fn lambda_matches_grid_minimizer() {
        let p = TwoAtom {
            support: FiniteSupport::new(vec![0.5, 0.5]).unwrap(),
        };
        let rho = 0.3;
        let (lo, hi) = (0.25, 1.0);
        let f = |l: f64| full_batch(&p, &[0.0], &RobustSpec::Chi2Pen { lambda: l }).unwrap().value + l * rho;
        let grid_min = (0..=750).map(|k| lo + k as f64 * 1e-3).min_by(|a, b| f(*a).total_cmp(&f(*b))).unwrap();
        let mut c = cfg(rho);
        c.sgm.iterations = 20_000;
        c.mlmc = MlmcConfig::new(16, 512).unwrap();
        let r = joint_xlambda_sgm(&p, (lo, hi), &c, &RngStream::new(2)).unwrap();
        assert!((r.lambda_hat - grid_min).abs() <= 0.05 * (hi - lo), "{} vs {grid_min}", r.lambda_hat);
    }

    #[test]
    fn doubling_on_bernoulli_reports_all_intervals() {
        let p = bernoulli_linear(0.3, 1.0, 1.0).unwrap();
        let mut c = cfg(1.0);
        c.epsilon = 0.25;
        c.sgm.iterations = 200;
        let (x, report) = doubling_minimize(&p, &c, &RngStream::new(3)).unwrap();
        assert_eq!(report.intervals.len(), 2);
        assert_eq!(x.len(), 1);
        assert_eq!(report.total_grad_evals, report.intervals.iter().map(|r| r.grad_evals).sum::<u64>());
        assert!(report.intervals.iter().all(|r| r.lambda_hat >= r.lo && r.lambda_hat <= r.hi));
    }
}
