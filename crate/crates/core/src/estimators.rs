//! Stochastic estimators of the robust gradient and value.
//!
//! - [`minibatch_estimate`]: solve the inner problem on `n` fresh samples and
//!   return `Σ q*_i ∇loss_i`. Unbiased for the surrogate `L̄(x; n)`, which is
//!   itself biased low relative to `L(x; P0)`.
//! - [`mlmc_estimate`]: randomized telescoping over batch sizes
//!   `n0, 2 n0, ..., n` with expected cost `n0 (1 + log2(n/n0))` and the same
//!   expectation as the mini-batch estimator at size `n`.
//! - [`dual_sgm_grad`]: single-sample gradients of the joint `(x, η)` dual.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::batch::LossBatch;
use crate::error::{DroError, Result};
use crate::inner::{robust_grad_from_inner, solve};
use crate::objective::RobustSpec;
use crate::problems::{draw_atoms, evaluate_batch, Problem};
use crate::rng::RngStream;
use crate::weights::chi2_divergence_from;

/// Result of one estimator call.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorOutput {
    pub grad: Vec<f64>,
    pub value_estimate: f64,
    pub grad_evals: u64,
}

impl EstimatorOutput {
    fn check(self) -> Result<Self> {
        if let Some(i) = self.grad.iter().position(|g| !g.is_finite()) {
            return Err(DroError::NonFinite {
                iteration: 0,
                what: format!("gradient coordinate {i}"),
            });
        }
        Ok(self)
    }
}

/// Batch sizes for the MLMC estimator: base size `n0` and cap
/// `n = 2^j_max · n0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlmcConfig {
    n0: usize,
    j_max: u32,
}

impl MlmcConfig {
    /// Requires `n / n0` to be a power of two, at least 2.
    pub fn new(n0: usize, n: usize) -> Result<Self> {
        if n0 == 0 {
            return Err(DroError::param("n0", "must be at least 1"));
        }
        if !n.is_multiple_of(n0) || !(n / n0).is_power_of_two() || n / n0 < 2 {
            return Err(DroError::param("n", format!("n/n0 must be a power of two >= 2, got n={n}, n0={n0}")));
        }
        Ok(Self {
            n0,
            j_max: (n / n0).trailing_zeros(),
        })
    }

    /// Like [`MlmcConfig::new`] but rounds `n` up to the next valid size.
    pub fn rounded(n0: usize, n: usize) -> Result<Self> {
        if n0 == 0 {
            return Err(DroError::param("n0", "must be at least 1"));
        }
        let ratio = n.div_ceil(n0).max(2).next_power_of_two();
        if ratio * n0 != n {
            warn!("MLMC cap {n} is not n0 times a power of two; using {}", ratio * n0);
        }
        Self::new(n0, ratio * n0)
    }

    pub fn n0(&self) -> usize {
        self.n0
    }

    pub fn j_max(&self) -> u32 {
        self.j_max
    }

    pub fn n(&self) -> usize {
        self.n0 << self.j_max
    }

    /// `E[2^J n0] = n0 (1 + j_max)`.
    pub fn expected_cost(&self) -> f64 {
        (self.n0 as f64) * f64::from(1 + self.j_max)
    }
}

/// What the MLMC estimator telescopes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MlmcTarget {
    /// Gradient only; `value_estimate` is the base-level value.
    Grad,
    /// Gradient and robust value.
    Value,
    /// Gradient and `∂/∂λ` of the χ²-penalized loss, i.e. `-χ²(q*)`,
    /// reported in `value_estimate`.
    LambdaDeriv,
}

/// `P(J = j) = 2^{-j + 1{j = j_max}}` for `j = 1..=j_max`.
pub fn level_distribution(cfg: &MlmcConfig) -> Vec<(u32, f64)> {
    (1..=cfg.j_max)
        .map(|j| {
            let e = if j == cfg.j_max { j - 1 } else { j };
            (j, 0.5f64.powi(e as i32))
        })
        .collect()
}

pub fn level_probability(cfg: &MlmcConfig, j: u32) -> f64 {
    let e = if j == cfg.j_max { j - 1 } else { j };
    0.5f64.powi(e as i32)
}

/// Draws `J` from [`level_distribution`].
pub fn draw_level(cfg: &MlmcConfig, stream: &mut RngStream) -> u32 {
    let mut j = 1;
    while j < cfg.j_max && stream.uniform() < 0.5 {
        j += 1;
    }
    j
}

/// Robust value, gradient and `-χ²(q*)` on one batch.
struct Level {
    value: f64,
    neg_div: f64,
    grad: Vec<f64>,
}

fn eval_level(batch: &LossBatch, spec: &RobustSpec) -> Result<Level> {
    let sol = solve(batch, spec)?;
    let grad = robust_grad_from_inner(batch, &sol)?;
    Ok(Level {
        value: sol.value,
        neg_div: -chi2_divergence_from(sol.weights.as_slice(), batch.probs()),
        grad,
    })
}

/// Mini-batch estimator on `n` fresh samples.
pub fn minibatch_estimate<P: Problem + ?Sized>(
    problem: &P,
    x: &[f64],
    spec: &RobustSpec,
    n: usize,
    stream: &mut RngStream,
) -> Result<EstimatorOutput> {
    if n == 0 {
        return Err(DroError::param("n", "batch size must be at least 1"));
    }
    let atoms = draw_atoms(problem, n, stream)?;
    let batch = evaluate_batch(problem, x, &atoms, true)?;
    let sol = solve(&batch, spec)?;
    EstimatorOutput {
        grad: robust_grad_from_inner(&batch, &sol)?,
        value_estimate: sol.value,
        grad_evals: n as u64,
    }
    .check()
}

/// Mini-batch robust value only (no gradients are computed).
pub fn minibatch_value<P: Problem + ?Sized>(
    problem: &P,
    x: &[f64],
    spec: &RobustSpec,
    n: usize,
    stream: &mut RngStream,
) -> Result<f64> {
    let atoms = draw_atoms(problem, n, stream)?;
    let batch = evaluate_batch(problem, x, &atoms, false)?;
    Ok(solve(&batch, spec)?.value)
}

/// MLMC estimator: draws `J`, then `2^J n0` samples, and returns
/// `F(S_1^{n0}) + D_{2^J n0} / P(J)` where
/// `D_k = F(S_1^k) - ½ F(S_1^{k/2}) - ½ F(S_{k/2+1}^k)`.
pub fn mlmc_estimate<P: Problem + ?Sized>(
    problem: &P,
    x: &[f64],
    spec: &RobustSpec,
    cfg: &MlmcConfig,
    target: MlmcTarget,
    stream: &mut RngStream,
) -> Result<EstimatorOutput> {
    let j = draw_level(cfg, stream);
    mlmc_level_estimate(problem, x, spec, cfg, target, j, stream)
}

/// The MLMC estimator conditioned on `J = j`. Averaging
/// `P(J=j) · h(output)` over the levels recovers `E h(M)` exactly, which is
/// how second moments are measured level by level.
pub fn mlmc_level_estimate<P: Problem + ?Sized>(
    problem: &P,
    x: &[f64],
    spec: &RobustSpec,
    cfg: &MlmcConfig,
    target: MlmcTarget,
    j: u32,
    stream: &mut RngStream,
) -> Result<EstimatorOutput> {
    if target == MlmcTarget::LambdaDeriv && !matches!(spec, RobustSpec::Chi2Pen { .. }) {
        return Err(DroError::Unsupported(format!("the λ-derivative target with {spec}")));
    }
    if j == 0 || j > cfg.j_max {
        return Err(DroError::param("j", format!("level must lie in 1..={}", cfg.j_max)));
    }
    let k = cfg.n0 << j;
    let atoms = draw_atoms(problem, k, stream)?;
    let batch = evaluate_batch(problem, x, &atoms, true)?;
    let full = eval_level(&batch, spec)?;
    let first = eval_level(&batch.slice(0..k / 2), spec)?;
    let second = eval_level(&batch.slice(k / 2..k), spec)?;
    let base = eval_level(&batch.slice(0..cfg.n0), spec)?;
    let w = 1.0 / level_probability(cfg, j);

    let grad = base
        .grad
        .iter()
        .zip(&full.grad)
        .zip(first.grad.iter().zip(&second.grad))
        .map(|((b, f), (a, c))| b + w * (f - 0.5 * a - 0.5 * c))
        .collect();
    let telescope = |pick: fn(&Level) -> f64| pick(&base) + w * (pick(&full) - 0.5 * pick(&first) - 0.5 * pick(&second));
    let value_estimate = match target {
        MlmcTarget::Grad => base.value,
        MlmcTarget::Value => telescope(|l| l.value),
        MlmcTarget::LambdaDeriv => telescope(|l| l.neg_div),
    };
    EstimatorOutput {
        grad,
        value_estimate,
        grad_evals: k as u64,
    }
    .check()
}

/// Per-sample gradient of the joint dual objective
/// `Υ(x, η; S) = λ ψ*((loss - η)/λ) + η` (χ²-penalty) or
/// `η + (loss - η)_+ / α` (CVaR). Returns `(∇_x Υ, ∂_η Υ)`.
pub fn dual_sgm_grad<P: Problem + ?Sized>(
    problem: &P,
    x: &[f64],
    eta: f64,
    spec: &RobustSpec,
    stream: &mut RngStream,
) -> Result<(Vec<f64>, f64)> {
    let s = problem.sample(stream)?;
    let mut g = vec![0.0; problem.dim()];
    let loss = problem.loss_grad(x, s, &mut g);
    let m = dual_multiplier(loss, eta, spec)?;
    g.iter_mut().for_each(|v| *v *= m);
    Ok((g, 1.0 - m))
}

/// Weight `ψ*'` applied to the sample gradient in the dual objective.
pub fn dual_multiplier(loss: f64, eta: f64, spec: &RobustSpec) -> Result<f64> {
    match *spec {
        RobustSpec::Cvar { alpha } => Ok(if loss >= eta { 1.0 / alpha } else { 0.0 }),
        RobustSpec::Chi2Pen { lambda } => Ok(((loss - eta) / lambda).max(0.0)),
        _ => Err(DroError::Unsupported(format!("dual SGM with {spec}"))),
    }
}

/// Gradient estimator used by the optimization drivers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EstimatorKind {
    Minibatch { n: usize },
    Mlmc { n0: usize, n_cap: usize },
}

impl EstimatorKind {
    pub fn estimate<P: Problem + ?Sized>(
        &self,
        problem: &P,
        x: &[f64],
        spec: &RobustSpec,
        stream: &mut RngStream,
    ) -> Result<EstimatorOutput> {
        match *self {
            EstimatorKind::Minibatch { n } => minibatch_estimate(problem, x, spec, n, stream),
            EstimatorKind::Mlmc { n0, n_cap } => {
                let cfg = MlmcConfig::rounded(n0, n_cap)?;
                mlmc_estimate(problem, x, spec, &cfg, MlmcTarget::Grad, stream)
            }
        }
    }
}
