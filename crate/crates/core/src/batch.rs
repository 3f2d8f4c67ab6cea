//! Loss values and per-sample gradients for one batch of samples.

use crate::error::{DroError, Result};

/// Losses `loss(x; s_i)` for a batch, optionally with per-sample gradients
/// (row-major, `n × dim`) and base probabilities.
///
/// Without `probs` the batch is the empirical distribution on its samples
/// (uniform weights `1/n`). With `probs` it describes a finite-support
/// distribution whose atoms carry the given probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBatch {
    values: Vec<f64>,
    grads: Option<Vec<f64>>,
    dim: usize,
    probs: Option<Vec<f64>>,
    bound_b: Option<f64>,
    bound_g: Option<f64>,
}

impl LossBatch {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(DroError::InvalidBatch("batch has no samples".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(DroError::InvalidBatch(format!("loss {i} is not finite ({})", values[i])));
        }
        Ok(Self {
            values,
            grads: None,
            dim: 0,
            probs: None,
            bound_b: None,
            bound_g: None,
        })
    }

    /// Batch with gradients stored as `values.len()` consecutive rows of
    /// length `dim`.
    pub fn with_grads(values: Vec<f64>, grads: Vec<f64>, dim: usize) -> Result<Self> {
        let mut b = Self::new(values)?;
        if grads.len() != b.values.len() * dim {
            return Err(DroError::InvalidBatch(format!(
                "gradient buffer has {} entries, expected {} x {}",
                grads.len(),
                b.values.len(),
                dim
            )));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(DroError::InvalidBatch("non-finite gradient entry".into()));
        }
        b.grads = Some(grads);
        b.dim = dim;
        Ok(b)
    }

    pub fn from_rows(values: Vec<f64>, rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.len() != values.len() || rows.iter().any(|r| r.len() != dim) {
            return Err(DroError::InvalidBatch("gradient rows have inconsistent shape".into()));
        }
        Self::with_grads(values, rows.concat(), dim)
    }

    /// Attach base probabilities (finite-support distribution).
    pub fn with_probs(mut self, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != self.values.len() {
            return Err(DroError::InvalidBatch("probability vector length mismatch".into()));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(DroError::InvalidBatch("probabilities must be nonnegative".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(DroError::InvalidBatch(format!("probabilities sum to {total}")));
        }
        self.probs = Some(probs);
        Ok(self)
    }

    /// Declare the loss bound `B`; every value must lie in `[0, B]`.
    pub fn with_bound_b(mut self, b: f64) -> Result<Self> {
        if let Some(v) = self.values.iter().find(|&&v| v < 0.0 || v > b) {
            return Err(DroError::InvalidBatch(format!("loss {v} outside [0, {b}]")));
        }
        self.bound_b = Some(b);
        Ok(self)
    }

    pub fn with_bound_g(mut self, g: f64) -> Self {
        self.bound_g = Some(g);
        self
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn probs(&self) -> Option<&[f64]> {
        self.probs.as_deref()
    }

    /// Base probability of sample `i`.
    pub fn prob(&self, i: usize) -> f64 {
        match &self.probs {
            Some(p) => p[i],
            None => 1.0 / self.values.len() as f64,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn has_grads(&self) -> bool {
        self.grads.is_some()
    }

    pub fn grad(&self, i: usize) -> Option<&[f64]> {
        self.grads.as_ref().map(|g| &g[i * self.dim..(i + 1) * self.dim])
    }

    pub fn bound_b(&self) -> Option<f64> {
        self.bound_b
    }

    pub fn bound_g(&self) -> Option<f64> {
        self.bound_g
    }

    /// Sub-batch of the contiguous samples `range` (uniform weights).
    pub fn slice(&self, range: std::ops::Range<usize>) -> Self {
        let grads = self
            .grads
            .as_ref()
            .map(|g| g[range.start * self.dim..range.end * self.dim].to_vec());
        Self {
            values: self.values[range].to_vec(),
            grads,
            dim: self.dim,
            probs: None,
            bound_b: self.bound_b,
            bound_g: self.bound_g,
        }
    }

    /// Probability-weighted mean loss.
    pub fn mean(&self) -> f64 {
        match &self.probs {
            Some(p) => p.iter().zip(&self.values).map(|(p, v)| p * v).sum(),
            None => self.values.iter().sum::<f64>() / self.values.len() as f64,
        }
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Indices sorted by descending loss, ties by ascending index.
    pub fn order_desc(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.values.len()).collect();
        idx.sort_by(|&a, &b| self.values[b].total_cmp(&self.values[a]));
        idx
    }
}
