//! Exact inner maximization over the simplex.
//!
//! For a batch of losses `l_1..l_n` with base probabilities `p` (uniform by
//! default) each solver returns the maximizing weights `q*`, the dual
//! variable `η*` that enforces `Σ q = 1`, and the robust value. All solvers
//! sort the losses once (descending, ties by ascending index) and then work
//! on prefix sums, so the cost is `O(n log n)`.

use crate::batch::LossBatch;
use crate::error::{DroError, Result};
use crate::objective::RobustSpec;
use crate::weights::{chi2_divergence_from, kl_divergence_from, Weights};

/// Stopping rule for bisection on `η`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BisectionConfig {
    pub tol_eta: f64,
    pub max_iters: usize,
}

impl Default for BisectionConfig {
    fn default() -> Self {
        Self {
            tol_eta: 1e-12,
            max_iters: 200,
        }
    }
}

impl BisectionConfig {
    /// Tolerance `1e-10 · B`, floored at `1e-12`.
    pub fn for_bound(b: f64) -> Self {
        Self {
            tol_eta: (1e-10 * b).max(1e-12),
            ..Self::default()
        }
    }
}

/// Maximizer of the inner problem for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct InnerSolution {
    pub weights: Weights,
    pub eta: f64,
    pub value: f64,
}

fn is_constant(batch: &LossBatch) -> bool {
    let v = batch.values();
    v.iter().all(|&x| x == v[0])
}

fn base_weights(batch: &LossBatch) -> Result<Weights> {
    match batch.probs() {
        Some(p) => Weights::new(p.to_vec()),
        None => Weights::uniform(batch.len()),
    }
}

/// Solve the inner problem for any objective with the default bisection rule.
pub fn solve(batch: &LossBatch, spec: &RobustSpec) -> Result<InnerSolution> {
    solve_with(batch, spec, &BisectionConfig::default())
}

pub fn solve_with(batch: &LossBatch, spec: &RobustSpec, cfg: &BisectionConfig) -> Result<InnerSolution> {
    match *spec {
        RobustSpec::Cvar { alpha } => solve_cvar(batch, alpha),
        RobustSpec::KlCvar { alpha, lambda } => solve_kl_cvar_with(batch, alpha, lambda, cfg),
        RobustSpec::Chi2Pen { lambda } => solve_chi2_pen(batch, lambda),
        RobustSpec::Chi2Con { rho } => solve_chi2_con(batch, rho),
    }
}

/// CVaR at level `alpha`: greedy allocation of `p_i / alpha` to the largest
/// losses, with the remainder on the marginal sample. `η` is the empirical
/// value at risk.
pub fn solve_cvar(batch: &LossBatch, alpha: f64) -> Result<InnerSolution> {
    RobustSpec::cvar(alpha)?;
    let values = batch.values();
    let n = batch.len();
    let order = batch.order_desc();
    let mut q = vec![0.0; n];
    let mut remaining = 1.0_f64;
    let mut cum_cap = 0.0_f64;
    let mut eta_pos = n - 1;
    let mut found = false;
    for (pos, &i) in order.iter().enumerate() {
        let cap = batch.prob(i) / alpha;
        if remaining > 0.0 {
            let take = cap.min(remaining);
            q[i] = take;
            remaining -= take;
            if remaining < 1e-15 {
                remaining = 0.0;
            }
        }
        cum_cap += cap;
        if !found && cum_cap > 1.0 + 1e-12 {
            eta_pos = pos;
            found = true;
        }
    }
    let weights = Weights::new(q)?;
    let value = weights.dot(values);
    Ok(InnerSolution {
        weights,
        eta: values[order[eta_pos]],
        value,
    })
}

/// Conjugate `ψ*` of the KL-CVaR penalty.
fn kl_cvar_conj(v: f64, alpha: f64) -> f64 {
    let log_cap = (1.0 / alpha).ln();
    if v < log_cap {
        v.exp() - 1.0
    } else {
        1.0 / alpha - 1.0 + (v - log_cap) / alpha
    }
}

/// Derivative of the conjugate, `min(e^v, 1/alpha)`.
fn kl_cvar_conj_deriv(v: f64, alpha: f64) -> f64 {
    if v >= (1.0 / alpha).ln() {
        1.0 / alpha
    } else {
        v.exp()
    }
}

pub fn solve_kl_cvar(batch: &LossBatch, alpha: f64, lambda: f64) -> Result<InnerSolution> {
    solve_kl_cvar_with(batch, alpha, lambda, &BisectionConfig::default())
}

/// KL-regularized CVaR. `η` solves `Σ p_i min(e^{(l_i-η)/λ}, 1/α) = 1` by
/// bisection, followed by an exact closed-form update once the set of capped
/// samples is known.
pub fn solve_kl_cvar_with(
    batch: &LossBatch,
    alpha: f64,
    lambda: f64,
    cfg: &BisectionConfig,
) -> Result<InnerSolution> {
    RobustSpec::kl_cvar(alpha, lambda)?;
    let values = batch.values();
    if is_constant(batch) {
        let weights = base_weights(batch)?;
        return Ok(InnerSolution {
            weights,
            eta: values[0],
            value: values[0],
        });
    }
    let mass = |eta: f64| -> f64 {
        (0..batch.len())
            .map(|i| batch.prob(i) * kl_cvar_conj_deriv((values[i] - eta) / lambda, alpha))
            .sum::<f64>()
            - 1.0
    };
    let (lo, hi) = bisect_decreasing(mass, batch.min(), batch.max(), cfg)?;
    let mid = 0.5 * (lo + hi);

    // Exact refinement: with the capped set C fixed,
    // e^{-η/λ} Σ_{i∉C} p_i e^{l_i/λ} = 1 - Σ_{i∈C} p_i/α.
    let log_cap = (1.0 / alpha).ln();
    let mut capped_mass = 0.0;
    let mut lse_terms = Vec::with_capacity(batch.len());
    for (i, &l) in values.iter().enumerate() {
        let p = batch.prob(i);
        if (l - mid) / lambda >= log_cap {
            capped_mass += p / alpha;
        } else if p > 0.0 {
            lse_terms.push(p.ln() + l / lambda);
        }
    }
    let slack = 1.0 - capped_mass;
    let mut eta = mid;
    if slack > 0.0 && !lse_terms.is_empty() {
        let m = lse_terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + lse_terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln();
        let candidate = lambda * (lse - slack.ln());
        let width = (hi - lo).max(cfg.tol_eta);
        if candidate.is_finite() && candidate >= lo - width && candidate <= hi + width {
            eta = candidate;
        }
    }

    let q: Vec<f64> = (0..batch.len())
        .map(|i| batch.prob(i) * kl_cvar_conj_deriv((values[i] - eta) / lambda, alpha))
        .collect();
    let weights = Weights::new(q)?;
    let value = weights.dot(values) - lambda * kl_divergence_from(weights.as_slice(), batch.probs());
    Ok(InnerSolution { weights, eta, value })
}

/// χ²-penalized objective. `η` solves `Σ p_i (l_i - η)_+ = λ`, found exactly
/// from sorted prefix sums; `q_i = p_i (l_i - η)_+ / λ`.
pub fn solve_chi2_pen(batch: &LossBatch, lambda: f64) -> Result<InnerSolution> {
    RobustSpec::chi2_pen(lambda)?;
    let values = batch.values();
    let eta = chi2_pen_eta_sorted(batch, lambda);
    debug_assert!({
        let check = chi2_pen_eta_bisect(batch, lambda, &BisectionConfig::default()).unwrap_or(eta);
        (check - eta).abs() <= 1e-9 * (1.0 + eta.abs())
    });
    let q: Vec<f64> = (0..batch.len())
        .map(|i| batch.prob(i) * (values[i] - eta).max(0.0) / lambda)
        .collect();
    let weights = Weights::new(q)?;
    let value = weights.dot(values) - lambda * chi2_divergence_from(weights.as_slice(), batch.probs());
    Ok(InnerSolution { weights, eta, value })
}

fn chi2_pen_eta_sorted(batch: &LossBatch, lambda: f64) -> f64 {
    let values = batch.values();
    let order = batch.order_desc();
    let (mut prefix_p, mut prefix_s) = (0.0, 0.0);
    for (k, &i) in order.iter().enumerate() {
        let p = batch.prob(i);
        prefix_p += p;
        prefix_s += p * values[i];
        if prefix_p <= 0.0 {
            continue;
        }
        let eta = (prefix_s - lambda) / prefix_p;
        match order.get(k + 1) {
            None => return eta,
            Some(&next) if eta >= values[next] => return eta,
            _ => {}
        }
    }
    unreachable!("the last prefix always yields a root")
}

/// Root of `Σ p_i (l_i - η)_+ = λ` by plain bisection on
/// `[min - λ, max]`. Cross-check for the sorted-prefix formula.
pub fn chi2_pen_eta_bisect(batch: &LossBatch, lambda: f64, cfg: &BisectionConfig) -> Result<f64> {
    let values = batch.values();
    let excess = |eta: f64| -> f64 {
        (0..batch.len())
            .map(|i| batch.prob(i) * (values[i] - eta).max(0.0))
            .sum::<f64>()
            - lambda
    };
    let (lo, hi) = bisect_decreasing(excess, batch.min() - lambda, batch.max(), cfg)?;
    Ok(0.5 * (lo + hi))
}

/// χ²-constrained objective with radius `rho`.
///
/// The dual `inf_η sqrt(1+2ρ) sqrt(Σ p (l-η)_+²) + η` is convex in `η`. Its
/// stationarity condition restricted to the segment where the top-`k`
/// samples are active is a quadratic in `η` with the closed-form root
/// `η = mean_k - u/P_k`, `u = sqrt(V_k / (1+2ρ - 1/P_k))`, where `P_k`,
/// `mean_k` and `V_k` are the mass, mean and weighted scatter of the active
/// prefix. Scanning the segments in order finds the unique root.
pub fn solve_chi2_con(batch: &LossBatch, rho: f64) -> Result<InnerSolution> {
    RobustSpec::chi2_con(rho)?;
    let values = batch.values();
    if is_constant(batch) {
        let weights = base_weights(batch)?;
        return Ok(InnerSolution {
            weights,
            eta: values[0],
            value: values[0],
        });
    }
    if rho == 0.0 {
        let weights = base_weights(batch)?;
        let value = weights.dot(values);
        return Ok(InnerSolution {
            weights,
            eta: f64::NEG_INFINITY,
            value,
        });
    }
    let c2 = 1.0 + 2.0 * rho;
    let order = batch.order_desc();
    let n = order.len();

    // Inactive constraint: all mass on the maximal losses is feasible.
    let top = values[order[0]];
    let top_mass: f64 = order
        .iter()
        .take_while(|&&i| values[i] == top)
        .map(|&i| batch.prob(i))
        .sum();
    if c2 * top_mass >= 1.0 {
        let q: Vec<f64> = (0..n)
            .map(|i| if values[i] == top { batch.prob(i) / top_mass } else { 0.0 })
            .collect();
        let weights = Weights::new(q)?;
        return Ok(InnerSolution {
            weights,
            eta: top,
            value: top,
        });
    }

    // Weighted running mean and scatter of the active prefix.
    let (mut mass, mut mean, mut scatter) = (0.0_f64, 0.0_f64, 0.0_f64);
    let mut root = None;
    for (k, &i) in order.iter().enumerate() {
        let p = batch.prob(i);
        if p > 0.0 {
            let new_mass = mass + p;
            let delta = values[i] - mean;
            let r = delta * p / new_mass;
            mean += r;
            scatter += mass * delta * r;
            mass = new_mass;
        }
        let next = order.get(k + 1).map(|&j| values[j]);
        if next == Some(values[i]) || mass <= 0.0 {
            continue;
        }
        let denom = c2 - 1.0 / mass;
        if denom <= 0.0 {
            continue;
        }
        let u = (scatter.max(0.0) / denom).sqrt();
        let eta = mean - u / mass;
        if next.is_none_or(|nv| eta >= nv) {
            root = Some((eta, u));
            break;
        }
    }
    let (eta, u) = root.ok_or(DroError::NonConvergence {
        iters: n,
        lo: batch.min(),
        hi: batch.max(),
    })?;
    if !(u > 0.0) {
        return Err(DroError::NonConvergence {
            iters: n,
            lo: eta,
            hi: eta,
        });
    }
    let q: Vec<f64> = (0..n)
        .map(|i| batch.prob(i) * (values[i] - eta).max(0.0) / u)
        .collect();
    let weights = Weights::new(q)?;
    let value = weights.dot(values);
    Ok(InnerSolution { weights, eta, value })
}

/// Subgradient `Σ q*_i ∇loss_i` of the batch robust loss.
pub fn robust_grad_from_inner(batch: &LossBatch, sol: &InnerSolution) -> Result<Vec<f64>> {
    if !batch.has_grads() {
        return Err(DroError::MissingGradients);
    }
    let mut g = vec![0.0; batch.dim()];
    for (i, &qi) in sol.weights.as_slice().iter().enumerate() {
        if qi == 0.0 {
            continue;
        }
        let gi = batch.grad(i).expect("checked above");
        for (acc, v) in g.iter_mut().zip(gi) {
            *acc += qi * v;
        }
    }
    Ok(g)
}

/// `∂/∂λ` of the χ²-penalized batch loss, equal to `-χ²(q*)`.
pub fn lambda_derivative(batch: &LossBatch, lambda: f64) -> Result<f64> {
    let sol = solve_chi2_pen(batch, lambda)?;
    Ok(-chi2_divergence_from(sol.weights.as_slice(), batch.probs()))
}

/// Primal objective `Σ q_i l_i - penalty(q)` at arbitrary weights `q`
/// (feasibility is not checked; see [`is_feasible`]).
pub fn primal_value(batch: &LossBatch, spec: &RobustSpec, q: &[f64]) -> f64 {
    let lin: f64 = q.iter().zip(batch.values()).map(|(a, b)| a * b).sum();
    match *spec {
        RobustSpec::Cvar { .. } | RobustSpec::Chi2Con { .. } => lin,
        RobustSpec::KlCvar { lambda, .. } => lin - lambda * kl_divergence_from(q, batch.probs()),
        RobustSpec::Chi2Pen { lambda } => lin - lambda * chi2_divergence_from(q, batch.probs()),
    }
}

/// Whether `q` satisfies the constraints of `spec` (up to `tol`).
pub fn is_feasible(batch: &LossBatch, spec: &RobustSpec, q: &[f64], tol: f64) -> bool {
    match *spec {
        RobustSpec::Cvar { alpha } | RobustSpec::KlCvar { alpha, .. } => {
            q.iter().enumerate().all(|(i, &qi)| qi <= batch.prob(i) / alpha + tol)
        }
        RobustSpec::Chi2Pen { .. } => true,
        RobustSpec::Chi2Con { rho } => chi2_divergence_from(q, batch.probs()) <= rho + tol,
    }
}

/// Dual objective evaluated at `η`; its infimum over `η` is the robust value.
pub fn dual_value(batch: &LossBatch, spec: &RobustSpec, eta: f64) -> f64 {
    let values = batch.values();
    let expect = |f: &dyn Fn(f64) -> f64| -> f64 { (0..batch.len()).map(|i| batch.prob(i) * f(values[i])).sum() };
    match *spec {
        RobustSpec::Cvar { alpha } => eta + expect(&|l| (l - eta).max(0.0)) / alpha,
        RobustSpec::KlCvar { alpha, lambda } => lambda * expect(&|l| kl_cvar_conj((l - eta) / lambda, alpha)) + eta,
        RobustSpec::Chi2Pen { lambda } => expect(&|l| (l - eta).max(0.0).powi(2)) / (2.0 * lambda) + lambda / 2.0 + eta,
        RobustSpec::Chi2Con { rho } => {
            if eta == f64::NEG_INFINITY {
                // Limit of the dual as η → -∞ (attained only for ρ = 0).
                return if rho == 0.0 { batch.mean() } else { f64::INFINITY };
            }
            (1.0 + 2.0 * rho).sqrt() * expect(&|l| (l - eta).max(0.0).powi(2)).sqrt() + eta
        }
    }
}

/// Bisection for the root of a nonincreasing function. Expands the bracket
/// by doubling when `f` has no sign change on `[lo, hi]`.
fn bisect_decreasing(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, cfg: &BisectionConfig) -> Result<(f64, f64)> {
    let mut width = (hi - lo).max(1.0);
    let mut expansions = 0;
    while f(lo) < 0.0 {
        lo -= width;
        width *= 2.0;
        expansions += 1;
        if expansions > 60 {
            return Err(DroError::NonConvergence { iters: 0, lo, hi });
        }
    }
    while f(hi) > 0.0 {
        hi += width;
        width *= 2.0;
        expansions += 1;
        if expansions > 120 {
            return Err(DroError::NonConvergence { iters: 0, lo, hi });
        }
    }
    for _ in 0..cfg.max_iters {
        if hi - lo <= cfg.tol_eta {
            return Ok((lo, hi));
        }
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            return Ok((lo, hi));
        }
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if hi - lo <= cfg.tol_eta {
        Ok((lo, hi))
    } else {
        Err(DroError::NonConvergence {
            iters: cfg.max_iters,
            lo,
            hi,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn batch(v: &[f64]) -> LossBatch {
        LossBatch::new(v.to_vec()).unwrap()
    }

    fn assert_q(sol: &InnerSolution, expected: &[f64]) {
        for (a, b) in sol.weights.as_slice().iter().zip(expected) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn cvar_examples() {
        let b = batch(&[3.0, 1.0, 2.0]);
        let s = solve_cvar(&b, 1.0 / 3.0).unwrap();
        assert_q(&s, &[1.0, 0.0, 0.0]);
        assert_abs_diff_eq!(s.value, 3.0, epsilon = 1e-12);

        let s = solve_cvar(&b, 1.0).unwrap();
        assert_q(&s, &[1.0 / 3.0; 3]);
        assert_abs_diff_eq!(s.value, 2.0, epsilon = 1e-12);

        let s = solve_cvar(&b, 0.5).unwrap();
        assert_q(&s, &[2.0 / 3.0, 0.0, 1.0 / 3.0]);
        assert_abs_diff_eq!(s.value, 8.0 / 3.0, epsilon = 1e-12);
        // (⌊αn⌋+1)-th largest loss
        assert_eq!(s.eta, 2.0);
        assert_eq!(solve_cvar(&b, 1.0 / 3.0).unwrap().eta, 2.0);
    }

    #[test]
    fn cvar_small_alpha_is_max() {
        let b = batch(&[0.2, 0.9, 0.4, 0.9]);
        let s = solve_cvar(&b, 0.01).unwrap();
        assert_abs_diff_eq!(s.value, 0.9, epsilon = 1e-15);
        // tie broken toward the lower index
        assert_q(&s, &[0.0, 1.0, 0.0, 0.0]);
        assert!(solve_cvar(&b, 0.0).is_err());
        assert!(solve_cvar(&b, 1.01).is_err());
    }

    #[test]
    fn kl_cvar_examples() {
        let s = solve_kl_cvar(&batch(&[0.0, 0.0]), 0.3, 0.7).unwrap();
        assert_q(&s, &[0.5, 0.5]);
        assert_eq!(s.value, 0.0);

        let s = solve_kl_cvar(&batch(&[1.0, 0.0]), 0.5, 1.0).unwrap();
        assert_abs_diff_eq!(s.value, ((1f64.exp() + 1.0) / 2.0).ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(s.value, 0.620114507, epsilon = 1e-8);

        let s = solve_kl_cvar(&batch(&[1.0, 0.0]), 0.5, 1e6).unwrap();
        assert_abs_diff_eq!(s.value, 0.5, epsilon = 1e-5);
    }

    #[test]
    fn kl_cvar_softmax_when_box_inactive() {
        let v = [0.3, 1.7, 0.9, 1.2];
        let lambda = 0.4;
        let s = solve_kl_cvar(&batch(&v), 0.2, lambda).unwrap();
        let soft = lambda * (v.iter().map(|l| (l / lambda).exp()).sum::<f64>() / 4.0).ln();
        assert_abs_diff_eq!(s.value, soft, epsilon = 1e-12);
    }

    #[test]
    fn kl_cvar_reports_nonconvergence() {
        let cfg = BisectionConfig {
            tol_eta: 1e-300,
            max_iters: 3,
        };
        match solve_kl_cvar_with(&batch(&[1.0, 0.0, 0.5]), 0.5, 0.1, &cfg) {
            Err(DroError::NonConvergence { iters, lo, hi }) => {
                assert_eq!(iters, 3);
                assert!(lo < hi);
            }
            other => panic!("expected NonConvergence, got {other:?}"),
        }
    }

    #[test]
    fn chi2_pen_examples() {
        let s = solve_chi2_pen(&batch(&[0.4; 5]), 0.3).unwrap();
        assert_q(&s, &[0.2; 5]);
        assert_abs_diff_eq!(s.value, 0.4, epsilon = 1e-12);

        let b = batch(&[1.0, 0.0]);
        let s = solve_chi2_pen(&b, 1.0).unwrap();
        assert_abs_diff_eq!(s.eta, -0.5, epsilon = 1e-12);
        assert_q(&s, &[0.75, 0.25]);
        assert_abs_diff_eq!(s.value, 0.625, epsilon = 1e-12);
        assert_abs_diff_eq!(dual_value(&b, &RobustSpec::Chi2Pen { lambda: 1.0 }, s.eta), 0.625, epsilon = 1e-12);

        let s = solve_chi2_pen(&b, 0.25).unwrap();
        assert_abs_diff_eq!(s.eta, 0.5, epsilon = 1e-12);
        assert_q(&s, &[1.0, 0.0]);
        assert_abs_diff_eq!(s.value, 0.875, epsilon = 1e-12);

        assert!(solve_chi2_pen(&b, 0.0).is_err());
    }

    #[test]
    fn chi2_pen_sorted_prefix_agrees_with_bisection() {
        let b = batch(&[0.1, 0.95, 0.3, 0.3, 0.7, 0.05]);
        for lambda in [0.01, 0.1, 0.3, 1.0, 5.0] {
            let sorted = chi2_pen_eta_sorted(&b, lambda);
            let bis = chi2_pen_eta_bisect(&b, lambda, &BisectionConfig::default()).unwrap();
            assert_abs_diff_eq!(sorted, bis, epsilon = 1e-10);
        }
    }

    #[test]
    fn chi2_con_examples() {
        let b = batch(&[1.0, 0.0, 0.25]);
        let s = solve_chi2_con(&b, 0.0).unwrap();
        assert_q(&s, &[1.0 / 3.0; 3]);
        assert_abs_diff_eq!(s.value, b.mean(), epsilon = 1e-12);

        let b = batch(&[1.0, 0.0]);
        let s = solve_chi2_con(&b, 0.5).unwrap();
        assert_q(&s, &[1.0, 0.0]);
        assert_abs_diff_eq!(s.value, 1.0, epsilon = 1e-12);

        let s = solve_chi2_con(&b, 0.125).unwrap();
        assert_q(&s, &[0.75, 0.25]);
        assert_abs_diff_eq!(s.value, 0.75, epsilon = 1e-12);
        assert_abs_diff_eq!(dual_value(&b, &RobustSpec::Chi2Con { rho: 0.125 }, s.eta), 0.75, epsilon = 1e-12);
    }

    #[test]
    fn chi2_con_constraint_binds_when_active() {
        let b = batch(&[0.9, 0.1, 0.5, 0.45, 0.2, 0.8]);
        for rho in [0.01, 0.1, 0.5, 1.0] {
            let s = solve_chi2_con(&b, rho).unwrap();
            let d = chi2_divergence_from(s.weights.as_slice(), None);
            assert!(d <= rho + 1e-9, "rho {rho} divergence {d}");
            if s.value < b.max() - 1e-12 {
                assert_abs_diff_eq!(d, rho, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn grad_from_inner() {
        let b = LossBatch::from_rows(vec![0.5], &[vec![1.0, -2.0]]).unwrap();
        let s = solve(&b, &RobustSpec::Chi2Con { rho: 1.0 }).unwrap();
        assert_eq!(robust_grad_from_inner(&b, &s).unwrap(), vec![1.0, -2.0]);

        let rows = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![2.0, 2.0]];
        let b = LossBatch::from_rows(vec![0.3, 0.9, 0.9], &rows).unwrap();
        let s = solve_cvar(&b, 1.0).unwrap();
        let g = robust_grad_from_inner(&b, &s).unwrap();
        assert_abs_diff_eq!(g[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(g[1], 1.0, epsilon = 1e-12);
        let s = solve_cvar(&b, 1.0 / 3.0).unwrap();
        assert_eq!(robust_grad_from_inner(&b, &s).unwrap(), vec![0.0, 1.0]);

        let no_grads = batch(&[1.0, 2.0]);
        let s = solve_cvar(&no_grads, 0.5).unwrap();
        assert!(matches!(robust_grad_from_inner(&no_grads, &s), Err(DroError::MissingGradients)));
    }

    #[test]
    fn lambda_derivative_examples() {
        assert_eq!(lambda_derivative(&batch(&[0.3, 0.3]), 0.5).unwrap(), 0.0);
        assert_abs_diff_eq!(lambda_derivative(&batch(&[1.0, 0.0]), 1.0).unwrap(), -0.125, epsilon = 1e-12);
        assert_abs_diff_eq!(lambda_derivative(&batch(&[1.0, 0.0]), 0.25).unwrap(), -0.5, epsilon = 1e-12);
    }

    #[test]
    fn lambda_derivative_matches_finite_difference() {
        let b = batch(&[0.9, 0.1, 0.5, 0.45, 0.2, 0.8]);
        for lambda in [0.05, 0.2, 0.7, 2.0] {
            let h = 1e-6;
            let fd = (solve_chi2_pen(&b, lambda + h).unwrap().value - solve_chi2_pen(&b, lambda - h).unwrap().value) / (2.0 * h);
            assert_abs_diff_eq!(lambda_derivative(&b, lambda).unwrap(), fd, epsilon = 1e-7);
        }
    }

    #[test]
    fn weighted_batches_match_replicated_uniform() {
        // Atoms with probabilities (1/4, 1/2, 1/4) behave like the uniform
        // batch with the middle atom duplicated.
        let weighted = batch(&[0.2, 0.7, 0.4]).with_probs(vec![0.25, 0.5, 0.25]).unwrap();
        let replicated = batch(&[0.2, 0.7, 0.7, 0.4]);
        for spec in [
            RobustSpec::Cvar { alpha: 0.3 },
            RobustSpec::KlCvar { alpha: 0.3, lambda: 0.2 },
            RobustSpec::Chi2Pen { lambda: 0.15 },
            RobustSpec::Chi2Con { rho: 0.4 },
        ] {
            let a = solve(&weighted, &spec).unwrap().value;
            let b = solve(&replicated, &spec).unwrap().value;
            assert_abs_diff_eq!(a, b, epsilon = 1e-10);
        }
    }
}
