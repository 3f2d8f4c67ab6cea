//! Problem instances.
//!
//! A [`Problem`] is a convex loss `loss(x; s)` together with a sampling
//! distribution `P0`. Samples are atom indices; every instance shipped here
//! has finite support and exposes its atom probabilities through
//! [`Problem::support`], which is what the exact oracles need.

use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::batch::LossBatch;
use crate::error::{DroError, Result};
use crate::rng::RngStream;

/// Probabilities of the atoms of a finite-support distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteSupport {
    probs: Vec<f64>,
    cdf: Vec<f64>,
    uniform: bool,
}

impl FiniteSupport {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(DroError::param("probs", "support has no atoms"));
        }
        if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(DroError::param("probs", "atom probabilities must be nonnegative"));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(DroError::param("probs", format!("atom probabilities sum to {total}")));
        }
        let cdf = probs
            .iter()
            .scan(0.0, |acc, p| {
                *acc += p;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            probs,
            cdf,
            uniform: false,
        })
    }

    pub fn uniform(n: usize) -> Result<Self> {
        let mut s = Self::new(vec![1.0 / n as f64; n.max(1)])?;
        if n == 0 {
            return Err(DroError::param("n", "support has no atoms"));
        }
        s.uniform = true;
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn is_uniform(&self) -> bool {
        self.uniform
    }

    pub fn sample(&self, stream: &mut RngStream) -> usize {
        if self.uniform {
            return stream.below(self.probs.len());
        }
        let u = stream.uniform();
        self.cdf.partition_point(|&c| c <= u).min(self.probs.len() - 1)
    }
}

/// A convex loss with a sampling distribution.
pub trait Problem: Send + Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    /// Radius of the Euclidean ball that is the feasible set, if any.
    fn radius(&self) -> Option<f64>;
    fn bound_b(&self) -> Option<f64>;
    fn bound_g(&self) -> Option<f64>;
    fn support(&self) -> Option<&FiniteSupport>;
    fn loss(&self, x: &[f64], s: usize) -> f64;
    /// Writes `∇loss(x; s)` into `out` and returns the loss.
    fn loss_grad(&self, x: &[f64], s: usize, out: &mut [f64]) -> f64;

    fn sample(&self, stream: &mut RngStream) -> Result<usize> {
        self.support().map(|s| s.sample(stream)).ok_or(DroError::InfiniteSupport)
    }

    fn initial_point(&self) -> Vec<f64> {
        vec![0.0; self.dim()]
    }
}

/// Evaluates losses (and gradients when `grads` is set) at the given atoms.
pub fn evaluate_batch<P: Problem + ?Sized>(problem: &P, x: &[f64], atoms: &[usize], grads: bool) -> Result<LossBatch> {
    let d = problem.dim();
    if grads {
        let mut g = vec![0.0; atoms.len() * d];
        let values = atoms
            .iter()
            .zip(g.chunks_mut(d.max(1)))
            .map(|(&s, row)| problem.loss_grad(x, s, &mut row[..d]))
            .collect();
        LossBatch::with_grads(values, g, d)
    } else {
        LossBatch::new(atoms.iter().map(|&s| problem.loss(x, s)).collect())
    }
}

/// All atoms of a finite-support problem, weighted by their probabilities.
pub fn support_batch<P: Problem + ?Sized>(problem: &P, x: &[f64], grads: bool) -> Result<LossBatch> {
    let support = problem.support().ok_or(DroError::InfiniteSupport)?;
    let atoms: Vec<usize> = (0..support.len()).collect();
    let batch = evaluate_batch(problem, x, &atoms, grads)?;
    if support.is_uniform() {
        Ok(batch)
    } else {
        batch.with_probs(support.probs().to_vec())
    }
}

pub fn draw_atoms<P: Problem + ?Sized>(problem: &P, n: usize, stream: &mut RngStream) -> Result<Vec<usize>> {
    (0..n).map(|_| problem.sample(stream)).collect()
}

fn linear_loss_grad(x: &[f64], offset: f64, slope: f64, out: &mut [f64]) -> f64 {
    out[0] = slope;
    offset + slope * x[0]
}

/// `P0 = Bernoulli(p0)`, `loss(x; s) = B·s·x` on `[-R, R]`.
///
/// At `x = 1` the loss is `B·s`, the instance behind the worst-case bias
/// constructions.
#[derive(Debug, Clone)]
pub struct BernoulliLinear {
    p0: f64,
    b: f64,
    r: f64,
    support: FiniteSupport,
}

pub fn bernoulli_linear(p0: f64, b: f64, r: f64) -> Result<BernoulliLinear> {
    if !(p0 > 0.0 && p0 < 1.0) {
        return Err(DroError::param("p0", format!("must lie in (0, 1), got {p0}")));
    }
    if !(b > 0.0 && b.is_finite()) {
        return Err(DroError::param("b", "must be positive"));
    }
    if !(r > 0.0 && r.is_finite()) {
        return Err(DroError::param("r", "must be positive"));
    }
    Ok(BernoulliLinear {
        p0,
        b,
        r,
        support: FiniteSupport::new(vec![1.0 - p0, p0])?,
    })
}

impl BernoulliLinear {
    pub fn p0(&self) -> f64 {
        self.p0
    }
}

impl Problem for BernoulliLinear {
    fn name(&self) -> &str {
        "bernoulli"
    }
    fn dim(&self) -> usize {
        1
    }
    fn radius(&self) -> Option<f64> {
        Some(self.r)
    }
    fn bound_b(&self) -> Option<f64> {
        Some(self.b * self.r)
    }
    fn bound_g(&self) -> Option<f64> {
        Some(self.b)
    }
    fn support(&self) -> Option<&FiniteSupport> {
        Some(&self.support)
    }
    fn loss(&self, x: &[f64], s: usize) -> f64 {
        self.b * s as f64 * x[0]
    }
    fn loss_grad(&self, x: &[f64], s: usize, out: &mut [f64]) -> f64 {
        linear_loss_grad(x, 0.0, self.b * s as f64, out)
    }
    fn initial_point(&self) -> Vec<f64> {
        vec![1.0]
    }
}

/// One member of the two-point CVaR lower-bound family: `S = G·μ` with
/// probability `α + δv`, otherwise `S = -G`, and `loss(x; s) = x·s` on
/// `[-R, R]`, where `μ = (δ/2α) / (1 - δ/2α)`.
#[derive(Debug, Clone)]
pub struct CvarLeCam {
    g: f64,
    r: f64,
    alpha: f64,
    mu: f64,
    v: i8,
    atoms: [f64; 2],
    support: FiniteSupport,
}

/// The pair `(P_1, P_{-1})`.
pub fn cvar_lecam_pair(g: f64, r: f64, alpha: f64, delta: f64) -> Result<(CvarLeCam, CvarLeCam)> {
    Ok((cvar_lecam(g, r, alpha, delta, 1)?, cvar_lecam(g, r, alpha, delta, -1)?))
}

pub fn cvar_lecam(g: f64, r: f64, alpha: f64, delta: f64, v: i8) -> Result<CvarLeCam> {
    if !(alpha > 0.0 && alpha < 0.5) {
        return Err(DroError::param("alpha", format!("must lie in (0, 1/2), got {alpha}")));
    }
    if !(delta >= 0.0 && delta <= alpha.min(1.0 - 2.0 * alpha)) {
        return Err(DroError::param("delta", format!("must lie in [0, min(alpha, 1 - 2 alpha)], got {delta}")));
    }
    if !(g > 0.0 && r > 0.0) {
        return Err(DroError::param("g", "G and R must be positive"));
    }
    if v != 1 && v != -1 {
        return Err(DroError::param("v", "must be +1 or -1"));
    }
    let ratio = delta / (2.0 * alpha);
    let mu = ratio / (1.0 - ratio);
    let p_top = alpha + delta * f64::from(v);
    Ok(CvarLeCam {
        g,
        r,
        alpha,
        mu,
        v,
        atoms: [g * mu, -g],
        support: FiniteSupport::new(vec![p_top, 1.0 - p_top])?,
    })
}

impl CvarLeCam {
    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Closed-form `CVaR_α` of the loss at `x`.
    pub fn analytic_objective(&self, x: f64) -> f64 {
        let (g, mu) = (self.g, self.mu);
        if self.v == 1 {
            if x <= 0.0 {
                -g * x
            } else {
                g * mu * x
            }
        } else if x <= 0.0 {
            -g * x
        } else {
            -g * mu * x
        }
    }

    /// `0` at `x = 0` for `v = 1`; `-G R μ` at `x = R` for `v = -1`.
    pub fn analytic_min(&self) -> (f64, f64) {
        if self.v == 1 {
            (0.0, 0.0)
        } else {
            (self.r, -self.g * self.r * self.mu)
        }
    }

    /// Separation `G R μ / 2` between the two problems.
    pub fn separation(&self) -> f64 {
        self.g * self.r * self.mu / 2.0
    }
}

impl Problem for CvarLeCam {
    fn name(&self) -> &str {
        "le_cam"
    }
    fn dim(&self) -> usize {
        1
    }
    fn radius(&self) -> Option<f64> {
        Some(self.r)
    }
    fn bound_b(&self) -> Option<f64> {
        None
    }
    fn bound_g(&self) -> Option<f64> {
        Some(self.g * self.mu.max(1.0))
    }
    fn support(&self) -> Option<&FiniteSupport> {
        Some(&self.support)
    }
    fn loss(&self, x: &[f64], s: usize) -> f64 {
        x[0] * self.atoms[s]
    }
    fn loss_grad(&self, x: &[f64], s: usize, out: &mut [f64]) -> f64 {
        linear_loss_grad(x, 0.0, self.atoms[s], out)
    }
    /// The far end of the interval, `x = R`.
    fn initial_point(&self) -> Vec<f64> {
        vec![self.r]
    }
}

/// Three-atom instance on which the χ²-constrained mini-batch gradient has
/// variance bounded away from zero for every batch size `n`.
///
/// `P(S=1) = 1/(1+2ρ)`, `P(S=2) = 1 - 2^{-1/n}` so that `(1 - P(S=2))^n = 1/2`,
/// losses at `x = 0` are `0, 1/(30n), 1` with slopes `-G, G, -G`.
#[derive(Debug, Clone)]
pub struct ThreePointHard {
    n: usize,
    offsets: [f64; 3],
    slopes: [f64; 3],
    g: f64,
    support: FiniteSupport,
}

pub fn three_point_hard(rho: f64, g: f64, n: usize) -> Result<ThreePointHard> {
    if n <= 4 {
        return Err(DroError::param("n", format!("must exceed 4, got {n}")));
    }
    if !(rho >= 1.0 && rho.is_finite()) {
        return Err(DroError::param("rho", format!("must be at least 1, got {rho}")));
    }
    if !(g > 0.0) {
        return Err(DroError::param("g", "must be positive"));
    }
    let p1 = 1.0 / (1.0 + 2.0 * rho);
    let p2 = -(-std::f64::consts::LN_2 / n as f64).exp_m1();
    let p0 = 1.0 - p1 - p2;
    Ok(ThreePointHard {
        n,
        offsets: [0.0, 1.0 / (30.0 * n as f64), 1.0],
        slopes: [-g, g, -g],
        g,
        support: FiniteSupport::new(vec![p0, p1, p2])?,
    })
}

impl ThreePointHard {
    pub fn n(&self) -> usize {
        self.n
    }
}

impl Problem for ThreePointHard {
    fn name(&self) -> &str {
        "three_point"
    }
    fn dim(&self) -> usize {
        1
    }
    fn radius(&self) -> Option<f64> {
        Some(1.0)
    }
    fn bound_b(&self) -> Option<f64> {
        None
    }
    fn bound_g(&self) -> Option<f64> {
        Some(self.g)
    }
    fn support(&self) -> Option<&FiniteSupport> {
        Some(&self.support)
    }
    fn loss(&self, x: &[f64], s: usize) -> f64 {
        self.offsets[s] + self.slopes[s] * x[0]
    }
    fn loss_grad(&self, x: &[f64], s: usize, out: &mut [f64]) -> f64 {
        linear_loss_grad(x, self.offsets[s], self.slopes[s], out)
    }
}

/// Deterministic `P0`: a single atom with loss `(c/2)‖x - target‖²`.
#[derive(Debug, Clone)]
pub struct PointMass {
    target: Vec<f64>,
    curvature: f64,
    radius: Option<f64>,
    support: FiniteSupport,
}

pub fn point_mass(target: Vec<f64>, curvature: f64, radius: Option<f64>) -> Result<PointMass> {
    if target.is_empty() {
        return Err(DroError::param("target", "dimension must be at least 1"));
    }
    if !(curvature >= 0.0 && curvature.is_finite()) {
        return Err(DroError::param("curvature", "must be nonnegative"));
    }
    Ok(PointMass {
        target,
        curvature,
        radius,
        support: FiniteSupport::uniform(1)?,
    })
}

impl Problem for PointMass {
    fn name(&self) -> &str {
        "point_mass"
    }
    fn dim(&self) -> usize {
        self.target.len()
    }
    fn radius(&self) -> Option<f64> {
        self.radius
    }
    fn bound_b(&self) -> Option<f64> {
        None
    }
    fn bound_g(&self) -> Option<f64> {
        None
    }
    fn support(&self) -> Option<&FiniteSupport> {
        Some(&self.support)
    }
    fn loss(&self, x: &[f64], _s: usize) -> f64 {
        0.5 * self.curvature * x.iter().zip(&self.target).map(|(a, t)| (a - t).powi(2)).sum::<f64>()
    }
    fn loss_grad(&self, x: &[f64], s: usize, out: &mut [f64]) -> f64 {
        for ((o, a), t) in out.iter_mut().zip(x).zip(&self.target) {
            *o = self.curvature * (a - t);
        }
        self.loss(x, s)
    }
}

/// Labeled feature vectors with optional subgroup tags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    features: Vec<f64>,
    feat_dim: usize,
    labels: Vec<usize>,
    groups: Option<Vec<i64>>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(features: Vec<f64>, feat_dim: usize, labels: Vec<usize>, groups: Option<Vec<i64>>) -> Result<Self> {
        if labels.is_empty() {
            return Err(DroError::Dataset {
                line: 0,
                reason: "dataset has no rows".into(),
            });
        }
        if features.len() != labels.len() * feat_dim {
            return Err(DroError::Dataset {
                line: 0,
                reason: format!("{} feature entries for {} rows of width {feat_dim}", features.len(), labels.len()),
            });
        }
        if let Some(g) = &groups {
            if g.len() != labels.len() {
                return Err(DroError::Dataset {
                    line: 0,
                    reason: "group column length differs from label column".into(),
                });
            }
        }
        let num_classes = labels.iter().max().map_or(0, |m| m + 1);
        Ok(Self {
            features,
            feat_dim,
            labels,
            groups,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feat_dim(&self) -> usize {
        self.feat_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.feat_dim..(i + 1) * self.feat_dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn groups(&self) -> Option<&[i64]> {
        self.groups.as_deref()
    }

    /// Largest Euclidean norm of a feature row.
    pub fn max_norm(&self) -> f64 {
        (0..self.len())
            .map(|i| self.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }

    /// Atom indices belonging to subgroup `g`.
    pub fn group_indices(&self, g: i64) -> Vec<usize> {
        match &self.groups {
            Some(tags) => tags.iter().enumerate().filter(|(_, &t)| t == g).map(|(i, _)| i).collect(),
            None => Vec::new(),
        }
    }
}

/// Reads a CSV with header `label,[group,]f0,f1,...`.
pub fn load_dataset_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path.as_ref())?;
    let headers = reader.headers()?.clone();
    let label_col = headers
        .iter()
        .position(|h| h.trim() == "label")
        .ok_or_else(|| DroError::Dataset {
            line: 1,
            reason: "missing required column `label`".into(),
        })?;
    let group_col = headers.iter().position(|h| h.trim() == "group");
    let feat_cols: Vec<usize> = (0..headers.len()).filter(|&c| c != label_col && Some(c) != group_col).collect();
    if feat_cols.is_empty() {
        return Err(DroError::Dataset {
            line: 1,
            reason: "no feature columns".into(),
        });
    }

    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut groups = group_col.map(|_| Vec::new());
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let field = |c: usize| -> Result<&str> {
            record.get(c).map(str::trim).ok_or_else(|| DroError::Dataset {
                line,
                reason: format!("missing column `{}`", &headers[c]),
            })
        };
        let label = field(label_col)?;
        labels.push(label.parse::<usize>().map_err(|_| DroError::Dataset {
            line,
            reason: format!("label `{label}` is not a nonnegative integer"),
        })?);
        if let (Some(c), Some(g)) = (group_col, groups.as_mut()) {
            let tag = field(c)?;
            g.push(tag.parse::<i64>().map_err(|_| DroError::Dataset {
                line,
                reason: format!("group `{tag}` is not an integer"),
            })?);
        }
        for &c in &feat_cols {
            let raw = field(c)?;
            let v: f64 = raw.parse().map_err(|_| DroError::Dataset {
                line,
                reason: format!("column `{}`: `{raw}` is not a number", &headers[c]),
            })?;
            if !v.is_finite() {
                return Err(DroError::Dataset {
                    line,
                    reason: format!("column `{}` is not finite", &headers[c]),
                });
            }
            features.push(v);
        }
    }
    Dataset::new(features, feat_cols.len(), labels, groups)
}

pub fn write_dataset_csv(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["label".to_string()];
    if dataset.groups.is_some() {
        header.push("group".into());
    }
    header.extend((0..dataset.feat_dim).map(|j| format!("f{j}")));
    w.write_record(&header)?;
    for i in 0..dataset.len() {
        let mut row = vec![dataset.labels[i].to_string()];
        if let Some(g) = &dataset.groups {
            row.push(g[i].to_string());
        }
        row.extend(dataset.row(i).iter().map(|v| format!("{v:e}")));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Gaussian class clusters with a rare subgroup whose cluster centers are
/// shifted. Rows are rescaled so the largest feature norm is 1.
pub fn synthetic_subgroup_dataset(
    n: usize,
    feat_dim: usize,
    num_classes: usize,
    rare_fraction: f64,
    seed: u64,
) -> Result<Dataset> {
    if n == 0 || feat_dim == 0 || num_classes < 2 {
        return Err(DroError::param("n", "need n >= 1, feat_dim >= 1 and at least two classes"));
    }
    if !(0.0..1.0).contains(&rare_fraction) {
        return Err(DroError::param("rare_fraction", "must lie in [0, 1)"));
    }
    let mut stream = RngStream::new(seed);
    let normal = |s: &mut RngStream| -> f64 { StandardNormal.sample(s.rng()) };
    let centers: Vec<Vec<f64>> = (0..2 * num_classes)
        .map(|_| (0..feat_dim).map(|_| normal(&mut stream)).collect())
        .collect();
    let mut features = Vec::with_capacity(n * feat_dim);
    let mut labels = Vec::with_capacity(n);
    let mut groups = Vec::with_capacity(n);
    for _ in 0..n {
        let group = i64::from(stream.uniform() < rare_fraction);
        let label = stream.below(num_classes);
        let center = &centers[group as usize * num_classes + label];
        for c in center {
            features.push(c + normal(&mut stream));
        }
        labels.push(label);
        groups.push(group);
    }
    let max_norm = features
        .chunks(feat_dim)
        .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    if max_norm > 0.0 {
        features.iter_mut().for_each(|v| *v /= max_norm);
    }
    Dataset::new(features, feat_dim, labels, Some(groups))
}

fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Binary logistic loss `log(1 + exp(-y⟨a, x⟩)) + (μ/2)‖x‖²` with labels
/// `{0, 1}` mapped to `y = ∓1`; uniform distribution over the rows.
#[derive(Debug, Clone)]
pub struct BinaryLogistic {
    data: Dataset,
    mu: f64,
    radius: f64,
    bound_b: f64,
    bound_g: f64,
    support: FiniteSupport,
}

pub fn binary_logistic(data: Dataset, mu: f64, radius: f64) -> Result<BinaryLogistic> {
    if data.num_classes() > 2 {
        return Err(DroError::Dataset {
            line: 0,
            reason: format!("binary logistic loss needs labels in {{0, 1}}, found {} classes", data.num_classes()),
        });
    }
    if !(mu >= 0.0 && radius > 0.0) {
        return Err(DroError::param("radius", "radius must be positive and mu nonnegative"));
    }
    let a = data.max_norm();
    let support = FiniteSupport::uniform(data.len())?;
    Ok(BinaryLogistic {
        bound_b: softplus(radius * a) + 0.5 * mu * radius * radius,
        bound_g: a + mu * radius,
        data,
        mu,
        radius,
        support,
    })
}

/// Planted linear classifier: `a ~ N(0, I_d)` with a rare group (10% of rows,
/// group 1) scaled by 3, labels `1{⟨w*, a⟩ + ξ/10 > 0}` for a random unit `w*`,
/// rows rescaled so the largest norm is 1.
pub fn planted_dataset(n: usize, d: usize, seed: u64) -> Result<Dataset> {
    if n == 0 || d == 0 {
        return Err(DroError::param("n", "need at least one row and one feature"));
    }
    let mut stream = RngStream::new(seed);
    let normal = |s: &mut RngStream| -> f64 { StandardNormal.sample(s.rng()) };
    let mut w: Vec<f64> = (0..d).map(|_| normal(&mut stream)).collect();
    let wn = w.iter().map(|v| v * v).sum::<f64>().sqrt();
    w.iter_mut().for_each(|v| *v /= wn);
    let mut features = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    let mut groups = Vec::with_capacity(n);
    for _ in 0..n {
        let rare = stream.uniform() < 0.1;
        let scale = if rare { 3.0 } else { 1.0 };
        let row: Vec<f64> = (0..d).map(|_| scale * normal(&mut stream)).collect();
        let score = row.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + 0.1 * normal(&mut stream);
        labels.push(usize::from(score > 0.0));
        groups.push(i64::from(rare));
        features.extend(row);
    }
    let max_norm = features
        .chunks(d)
        .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    features.iter_mut().for_each(|v| *v /= max_norm);
    Dataset::new(features, d, labels, Some(groups))
}

/// Binary logistic regression on [`planted_dataset`] without regularization.
pub fn synthetic_logistic(n: usize, d: usize, radius: f64, seed: u64) -> Result<BinaryLogistic> {
    binary_logistic(planted_dataset(n, d, seed)?, 0.0, radius)
}

impl BinaryLogistic {
    pub fn dataset(&self) -> &Dataset {
        &self.data
    }

    fn margin(&self, x: &[f64], s: usize) -> (f64, f64) {
        let y = if self.data.label(s) == 1 { 1.0 } else { -1.0 };
        let m = y * self.data.row(s).iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        (y, m)
    }

    fn reg(&self, x: &[f64]) -> f64 {
        0.5 * self.mu * x.iter().map(|v| v * v).sum::<f64>()
    }
}

impl Problem for BinaryLogistic {
    fn name(&self) -> &str {
        "binary_logistic"
    }
    fn dim(&self) -> usize {
        self.data.feat_dim()
    }
    fn radius(&self) -> Option<f64> {
        Some(self.radius)
    }
    fn bound_b(&self) -> Option<f64> {
        Some(self.bound_b)
    }
    fn bound_g(&self) -> Option<f64> {
        Some(self.bound_g)
    }
    fn support(&self) -> Option<&FiniteSupport> {
        Some(&self.support)
    }
    fn loss(&self, x: &[f64], s: usize) -> f64 {
        softplus(-self.margin(x, s).1) + self.reg(x)
    }
    fn loss_grad(&self, x: &[f64], s: usize, out: &mut [f64]) -> f64 {
        let (y, m) = self.margin(x, s);
        let w = -y * sigmoid(-m);
        for ((o, a), xi) in out.iter_mut().zip(self.data.row(s)).zip(x) {
            *o = w * a + self.mu * xi;
        }
        softplus(-m) + self.reg(x)
    }
}

/// Multi-class logistic loss
/// `log Σ_c exp(⟨w_c - w_y, z⟩ + b_c - b_y) + (μ/2) Σ_c ‖w_c‖²`.
///
/// The parameter is laid out class by class as `[w_c (feat_dim entries), b_c]`,
/// so `dim = C · (feat_dim + 1)`. Biases are not regularized.
#[derive(Debug, Clone)]
pub struct MulticlassLogistic {
    data: Dataset,
    mu: f64,
    radius: f64,
    bound_b: f64,
    bound_g: f64,
    support: FiniteSupport,
}

pub fn multiclass_logistic(data: Dataset, mu: f64, radius: f64) -> Result<MulticlassLogistic> {
    if !(mu >= 0.0 && mu.is_finite()) {
        return Err(DroError::param("mu", "must be nonnegative"));
    }
    if !(radius > 0.0) {
        return Err(DroError::param("radius", "must be positive"));
    }
    if data.num_classes() < 2 {
        return Err(DroError::Dataset {
            line: 0,
            reason: "need at least two classes".into(),
        });
    }
    let z = (data.max_norm().powi(2) + 1.0).sqrt();
    let c = data.num_classes() as f64;
    let support = FiniteSupport::uniform(data.len())?;
    Ok(MulticlassLogistic {
        bound_b: c.ln() + std::f64::consts::SQRT_2 * radius * z + 0.5 * mu * radius * radius,
        bound_g: std::f64::consts::SQRT_2 * z + mu * radius,
        data,
        mu,
        radius,
        support,
    })
}

impl MulticlassLogistic {
    pub fn dataset(&self) -> &Dataset {
        &self.data
    }

    pub fn num_classes(&self) -> usize {
        self.data.num_classes()
    }

    /// Override the declared loss bound.
    pub fn with_bound_b(mut self, b: f64) -> Self {
        self.bound_b = b;
        self
    }

    fn scores(&self, x: &[f64], s: usize) -> Vec<f64> {
        let f = self.data.feat_dim();
        let z = self.data.row(s);
        x.chunks(f + 1)
            .map(|block| block[..f].iter().zip(z).map(|(w, v)| w * v).sum::<f64>() + block[f])
            .collect()
    }

    fn reg(&self, x: &[f64]) -> f64 {
        let f = self.data.feat_dim();
        0.5 * self.mu * x.chunks(f + 1).map(|b| b[..f].iter().map(|w| w * w).sum::<f64>()).sum::<f64>()
    }
}

impl Problem for MulticlassLogistic {
    fn name(&self) -> &str {
        "multiclass_logistic"
    }
    fn dim(&self) -> usize {
        self.data.num_classes() * (self.data.feat_dim() + 1)
    }
    fn radius(&self) -> Option<f64> {
        Some(self.radius)
    }
    fn bound_b(&self) -> Option<f64> {
        Some(self.bound_b)
    }
    fn bound_g(&self) -> Option<f64> {
        Some(self.bound_g)
    }
    fn support(&self) -> Option<&FiniteSupport> {
        Some(&self.support)
    }
    fn loss(&self, x: &[f64], s: usize) -> f64 {
        let scores = self.scores(x, s);
        let y = scores[self.data.label(s)];
        let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        m - y + scores.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + self.reg(x)
    }
    fn loss_grad(&self, x: &[f64], s: usize, out: &mut [f64]) -> f64 {
        let f = self.data.feat_dim();
        let z = self.data.row(s);
        let label = self.data.label(s);
        let scores = self.scores(x, s);
        let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = scores.iter().map(|v| (v - m).exp()).sum();
        for (c, (block, xb)) in out.chunks_mut(f + 1).zip(x.chunks(f + 1)).enumerate() {
            let w = (scores[c] - m).exp() / total - if c == label { 1.0 } else { 0.0 };
            for ((o, v), xi) in block[..f].iter_mut().zip(z).zip(&xb[..f]) {
                *o = w * v + self.mu * xi;
            }
            block[f] = w;
        }
        m - scores[label] + total.ln() + self.reg(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn fd_check<P: Problem>(p: &P, x: &[f64], s: usize) {
        let mut g = vec![0.0; p.dim()];
        p.loss_grad(x, s, &mut g);
        for j in 0..p.dim() {
            let h = 1e-6;
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[j] += h;
            xm[j] -= h;
            let fd = (p.loss(&xp, s) - p.loss(&xm, s)) / (2.0 * h);
            assert!((fd - g[j]).abs() <= 1e-6 * (1.0 + g[j].abs()), "coord {j}: {fd} vs {}", g[j]);
        }
    }

    #[test]
    fn finite_support_sampling_matches_probs() {
        let s = FiniteSupport::new(vec![0.2, 0.0, 0.8]).unwrap();
        let mut stream = RngStream::new(3);
        let mut counts = [0usize; 3];
        for _ in 0..20_000 {
            counts[s.sample(&mut stream)] += 1;
        }
        assert_eq!(counts[1], 0);
        assert!((counts[0] as f64 / 20_000.0 - 0.2).abs() < 0.02);
        assert!(FiniteSupport::new(vec![0.5, 0.6]).is_err());
    }

    #[test]
    fn three_point_probabilities() {
        let p = three_point_hard(1.0, 1.0, 8).unwrap();
        let probs = p.support().unwrap().probs();
        assert_abs_diff_eq!(probs[1], 1.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!((1.0 - probs[2]).powi(8), 0.5, epsilon = 1e-14);
        assert_abs_diff_eq!(probs[2], 1.0 - 2f64.powf(-1.0 / 8.0), epsilon = 1e-15);
        assert_abs_diff_eq!(p.loss(&[0.0], 1), 1.0 / 240.0, epsilon = 1e-15);
        assert!(three_point_hard(1.0, 1.0, 4).is_err());
        assert!(three_point_hard(0.5, 1.0, 8).is_err());
    }

    #[test]
    fn lecam_analytic_values() {
        let (p1, pm1) = cvar_lecam_pair(1.0, 1.0, 0.1, 0.05).unwrap();
        assert_abs_diff_eq!(p1.mu(), 0.25 / 0.75, epsilon = 1e-15);
        assert_eq!(p1.analytic_min(), (0.0, 0.0));
        assert_abs_diff_eq!(pm1.analytic_min().1, -p1.mu(), epsilon = 1e-15);
        assert_abs_diff_eq!(p1.separation(), p1.mu() / 2.0, epsilon = 1e-15);
        let (a, b) = cvar_lecam_pair(1.0, 1.0, 0.1, 0.0).unwrap();
        assert_eq!(a.support().unwrap().probs(), b.support().unwrap().probs());
        assert!(cvar_lecam_pair(1.0, 1.0, 0.1, 0.2).is_err());
    }

    #[test]
    fn multiclass_zero_parameters_give_log_c() {
        let data = synthetic_subgroup_dataset(30, 4, 3, 0.2, 1).unwrap();
        let p = multiclass_logistic(data, 0.1, 10.0).unwrap();
        let x = vec![0.0; p.dim()];
        for s in 0..30 {
            assert_abs_diff_eq!(p.loss(&x, s), 3f64.ln(), epsilon = 1e-12);
        }
    }

    #[test]
    fn multiclass_binary_reduces_to_logistic() {
        let data = synthetic_subgroup_dataset(20, 3, 2, 0.0, 5).unwrap();
        let p = multiclass_logistic(data.clone(), 0.0, 10.0).unwrap();
        let mut stream = RngStream::new(9);
        for _ in 0..10 {
            let x: Vec<f64> = (0..p.dim()).map(|_| stream.uniform() - 0.5).collect();
            for s in 0..20 {
                let scores = p.scores(&x, s);
                let y = data.label(s);
                let margin = scores[y] - scores[1 - y];
                assert_abs_diff_eq!(p.loss(&x, s), (1.0 + (-margin).exp()).ln(), epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let data = synthetic_subgroup_dataset(15, 3, 4, 0.2, 2).unwrap();
        let p = multiclass_logistic(data, 0.05, 10.0).unwrap();
        let mut stream = RngStream::new(4);
        for s in 0..15 {
            let x: Vec<f64> = (0..p.dim()).map(|_| 2.0 * stream.uniform() - 1.0).collect();
            fd_check(&p, &x, s);
        }
        let b = synthetic_logistic(40, 5, 3.0, 7).unwrap();
        for s in 0..40 {
            let x: Vec<f64> = (0..5).map(|_| 2.0 * stream.uniform() - 1.0).collect();
            fd_check(&b, &x, s);
        }
    }

    #[test]
    fn logistic_bounds_hold_on_the_ball() {
        let b = synthetic_logistic(200, 5, 3.0, 11).unwrap();
        assert_eq!(b.dim(), 5);
        let mut stream = RngStream::new(1);
        let mut g = vec![0.0; 5];
        for _ in 0..200 {
            let mut x: Vec<f64> = (0..5).map(|_| stream.uniform() - 0.5).collect();
            let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            x.iter_mut().for_each(|v| *v *= 3.0 / norm);
            let s = stream.below(200);
            let l = b.loss_grad(&x, s, &mut g);
            assert!(l >= 0.0 && l <= b.bound_b().unwrap() + 1e-12);
            assert!(g.iter().map(|v| v * v).sum::<f64>().sqrt() <= b.bound_g().unwrap() + 1e-12);
        }
    }

    #[test]
    fn csv_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        std::fs::write(&path, "label,group,f0,f1\n0,1,0.5,1.5\n2,0,-1,2\n1,0,0,0\n").unwrap();
        let d = load_dataset_csv(&path).unwrap();
        assert_eq!(d.len(), 3);
        assert_eq!(d.feat_dim(), 2);
        assert_eq!(d.labels(), &[0, 2, 1]);
        assert_eq!(d.groups().unwrap(), &[1, 0, 0]);
        assert_eq!(d.row(1), &[-1.0, 2.0]);

        let out = dir.path().join("e.csv");
        write_dataset_csv(&d, &out).unwrap();
        assert_eq!(load_dataset_csv(&out).unwrap(), d);

        std::fs::write(&path, "f0,f1\n0.5,1.5\n").unwrap();
        let err = load_dataset_csv(&path).unwrap_err().to_string();
        assert!(err.contains("label"), "{err}");

        std::fs::write(&path, "label,f0\n0,1\n1,abc\n").unwrap();
        match load_dataset_csv(&path).unwrap_err() {
            DroError::Dataset { line, reason } => {
                assert_eq!(line, 3);
                assert!(reason.contains("f0"));
            }
            e => panic!("unexpected {e}"),
        }

        std::fs::write(&path, "label,f0,f1\n0,1,2\n1,3,4\n").unwrap();
        assert!(load_dataset_csv(&path).unwrap().groups().is_none());
    }
}
