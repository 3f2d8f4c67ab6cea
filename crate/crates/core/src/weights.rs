//! Probability vectors on the simplex and their divergences from a base
//! distribution.

use crate::error::{DroError, Result};

/// Tolerance on `|Σ q - 1|` accepted as-is.
pub const SIMPLEX_TOL: f64 = 1e-9;
/// Larger deviations up to this bound are renormalized; beyond it, rejected.
pub const RENORMALIZE_TOL: f64 = 1e-7;

/// A point `q` of the probability simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    q: Vec<f64>,
}

impl Weights {
    pub fn new(mut q: Vec<f64>) -> Result<Self> {
        if q.is_empty() {
            return Err(DroError::InvalidWeights("empty weight vector".into()));
        }
        for (i, &v) in q.iter().enumerate() {
            if !v.is_finite() || v < -SIMPLEX_TOL {
                return Err(DroError::InvalidWeights(format!("q[{i}] = {v}")));
            }
        }
        for v in &mut q {
            *v = v.max(0.0);
        }
        let total: f64 = q.iter().sum();
        let dev = (total - 1.0).abs();
        if dev > RENORMALIZE_TOL {
            return Err(DroError::InvalidWeights(format!("sum is {total}")));
        }
        if dev > 0.0 {
            q.iter_mut().for_each(|v| *v /= total);
        }
        Ok(Self { q })
    }

    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(DroError::InvalidWeights("empty weight vector".into()));
        }
        Ok(Self {
            q: vec![1.0 / n as f64; n],
        })
    }

    pub fn point_mass(n: usize, i: usize) -> Result<Self> {
        if i >= n {
            return Err(DroError::InvalidWeights(format!("index {i} out of range for n = {n}")));
        }
        let mut q = vec![0.0; n];
        q[i] = 1.0;
        Ok(Self { q })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.q
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.q
    }

    pub fn len(&self) -> usize {
        self.q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }

    pub fn dot(&self, values: &[f64]) -> f64 {
        self.q.iter().zip(values).map(|(q, v)| q * v).sum()
    }
}

/// `χ²` divergence `½ Σ p_i (q_i/p_i - 1)²` from the base distribution `p`,
/// or from uniform when `p` is `None`.
pub fn chi2_divergence_from(q: &[f64], p: Option<&[f64]>) -> f64 {
    let n = q.len() as f64;
    match p {
        None => 0.5 / n * q.iter().map(|&qi| (n * qi - 1.0).powi(2)).sum::<f64>(),
        Some(p) => {
            0.5 * q
                .iter()
                .zip(p)
                .map(|(&qi, &pi)| {
                    if pi > 0.0 {
                        pi * (qi / pi - 1.0).powi(2)
                    } else if qi > 0.0 {
                        f64::INFINITY
                    } else {
                        0.0
                    }
                })
                .sum::<f64>()
        }
    }
}

/// `KL(q‖p) = Σ p_i φ(q_i/p_i)` with `φ(t) = t log t - t + 1`.
pub fn kl_divergence_from(q: &[f64], p: Option<&[f64]>) -> f64 {
    let n = q.len() as f64;
    let phi = |t: f64| if t > 0.0 { t * t.ln() - t + 1.0 } else { 1.0 };
    match p {
        None => q.iter().map(|&qi| phi(n * qi)).sum::<f64>() / n,
        Some(p) => q
            .iter()
            .zip(p)
            .map(|(&qi, &pi)| {
                if pi > 0.0 {
                    pi * phi(qi / pi)
                } else if qi > 0.0 {
                    f64::INFINITY
                } else {
                    0.0
                }
            })
            .sum(),
    }
}

/// `χ²` divergence of `q` from the uniform distribution on `n = q.len()` points.
pub fn chi2_divergence(q: &Weights) -> f64 {
    chi2_divergence_from(q.as_slice(), None)
}

/// KL divergence of `q` from uniform. The CVaR box `n q_i <= 1/alpha` is not
/// checked here.
pub fn kl_divergence(q: &Weights) -> f64 {
    kl_divergence_from(q.as_slice(), None)
}
