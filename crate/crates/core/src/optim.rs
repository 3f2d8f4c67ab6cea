//! Optimization drivers: projected SGM, Nesterov acceleration, averaging and
//! step-size rules.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{DroError, Result};
use crate::estimators::{dual_sgm_grad, EstimatorKind, EstimatorOutput};
use crate::objective::RobustSpec;
use crate::oracle::full_batch;
use crate::problems::Problem;
use crate::rng::RngStream;
use crate::stats::norm;

/// Source of stochastic gradients for the drivers.
pub trait StochasticGradient {
    fn dim(&self) -> usize;
    fn estimate(&self, x: &[f64], stream: &mut RngStream) -> Result<EstimatorOutput>;
    /// Exact objective at `x`, when it can be computed. Used for traces.
    fn evaluate(&self, _x: &[f64]) -> Option<f64> {
        None
    }
}

/// Robust objective of a problem with a chosen gradient estimator.
pub struct RobustObjective<'a, P: ?Sized> {
    pub problem: &'a P,
    pub spec: RobustSpec,
    pub estimator: EstimatorKind,
}

impl<'a, P: Problem + ?Sized> RobustObjective<'a, P> {
    pub fn new(problem: &'a P, spec: RobustSpec, estimator: EstimatorKind) -> Self {
        Self {
            problem,
            spec,
            estimator,
        }
    }
}

impl<P: Problem + ?Sized> StochasticGradient for RobustObjective<'_, P> {
    fn dim(&self) -> usize {
        self.problem.dim()
    }
    fn estimate(&self, x: &[f64], stream: &mut RngStream) -> Result<EstimatorOutput> {
        self.estimator.estimate(self.problem, x, &self.spec, stream)
    }
    fn evaluate(&self, x: &[f64]) -> Option<f64> {
        full_batch(self.problem, x, &self.spec).ok().map(|s| s.value)
    }
}

/// Deterministic gradients of a smooth function `f(x) -> (value, grad)`.
pub struct ExactGradient<F> {
    dim: usize,
    f: F,
}

impl<F: Fn(&[f64]) -> (f64, Vec<f64>)> ExactGradient<F> {
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F: Fn(&[f64]) -> (f64, Vec<f64>)> StochasticGradient for ExactGradient<F> {
    fn dim(&self) -> usize {
        self.dim
    }
    fn estimate(&self, x: &[f64], _stream: &mut RngStream) -> Result<EstimatorOutput> {
        let (value, grad) = (self.f)(x);
        Ok(EstimatorOutput {
            grad,
            value_estimate: value,
            grad_evals: 1,
        })
    }
    fn evaluate(&self, x: &[f64]) -> Option<f64> {
        Some((self.f)(x).0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Momentum {
    /// Plain projected SGM.
    #[default]
    None,
    /// Constant momentum `ω`.
    Constant(f64),
    /// Three-sequence accelerated method with `θ_t = 2/(t+1)`.
    NesterovTheta,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    /// Last iterate.
    #[default]
    None,
    /// Mean of all iterates.
    Full,
    /// Mean of the last `⌈T/k⌉` iterates.
    Suffix(usize),
}

fn default_eval_points() -> usize {
    200
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgmConfig {
    pub step_size: f64,
    pub iterations: usize,
    #[serde(default)]
    pub momentum: Momentum,
    #[serde(default)]
    pub averaging: Averaging,
    #[serde(default)]
    pub radius: Option<f64>,
    /// Number of trace records (roughly); one every `max(1, T/eval_points)`
    /// iterations plus the last.
    #[serde(default = "default_eval_points")]
    pub eval_points: usize,
}

impl SgmConfig {
    pub fn new(step_size: f64, iterations: usize) -> Self {
        Self {
            step_size,
            iterations,
            momentum: Momentum::None,
            averaging: Averaging::None,
            radius: None,
            eval_points: default_eval_points(),
        }
    }

    pub fn with_momentum(mut self, m: Momentum) -> Self {
        self.momentum = m;
        self
    }

    pub fn with_averaging(mut self, a: Averaging) -> Self {
        self.averaging = a;
        self
    }

    pub fn with_radius(mut self, r: Option<f64>) -> Self {
        self.radius = r;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(DroError::param("step_size", format!("must be positive, got {}", self.step_size)));
        }
        if self.iterations == 0 {
            return Err(DroError::param("iterations", "must be at least 1"));
        }
        if let Momentum::Constant(w) = self.momentum {
            if !(0.0..1.0).contains(&w) {
                return Err(DroError::param("momentum", format!("must lie in [0, 1), got {w}")));
            }
        }
        if self.averaging == Averaging::Suffix(0) {
            return Err(DroError::param("averaging", "suffix parameter must be at least 1"));
        }
        if let Some(r) = self.radius {
            if !(r > 0.0) {
                return Err(DroError::param("radius", "must be positive"));
            }
        }
        Ok(())
    }

    fn eval_every(&self) -> usize {
        (self.iterations / self.eval_points.max(1)).max(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iter: usize,
    pub grad_evals: u64,
    pub value: f64,
    pub step_size: f64,
    pub wall_ms: u64,
}

/// Records of a run, in iteration order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub records: Vec<TraceRecord>,
}

impl RunTrace {
    pub fn final_value(&self) -> Option<f64> {
        self.records.last().map(|r| r.value)
    }

    pub fn total_grad_evals(&self) -> u64 {
        self.records.last().map_or(0, |r| r.grad_evals)
    }

    /// First record whose value is within `frac · |reference|` of
    /// `reference`.
    pub fn first_within(&self, reference: f64, frac: f64) -> Option<&TraceRecord> {
        self.records.iter().find(|r| r.value <= reference + frac * reference.abs())
    }
}

/// Euclidean projection onto the ball of radius `r`.
pub fn project_ball(x: &[f64], r: f64) -> Vec<f64> {
    let mut out = x.to_vec();
    project_ball_in_place(&mut out, r);
    out
}

pub fn project_ball_in_place(x: &mut [f64], r: f64) {
    let nx = norm(x);
    if nx > r {
        let s = r / nx;
        x.iter_mut().for_each(|v| *v *= s);
    }
}

fn project(x: &mut [f64], radius: Option<f64>) {
    if let Some(r) = radius {
        project_ball_in_place(x, r);
    }
}

/// Running average over the iterates selected by an [`Averaging`] rule for a
/// run of known length, in `O(d)` memory.
#[derive(Debug, Clone)]
pub struct Averager {
    start: usize,
    count: usize,
    avg: Vec<f64>,
}

impl Averager {
    /// Averages iterates `t >= start` among `t = 1..=iterations`.
    pub fn new(averaging: Averaging, iterations: usize, dim: usize) -> Self {
        let start = match averaging {
            Averaging::None => iterations,
            Averaging::Full => 1,
            Averaging::Suffix(k) => iterations + 1 - iterations.div_ceil(k.max(1)),
        };
        Self {
            start,
            count: 0,
            avg: vec![0.0; dim],
        }
    }

    pub fn push(&mut self, t: usize, x: &[f64]) {
        if t < self.start {
            return;
        }
        self.count += 1;
        let w = 1.0 / self.count as f64;
        for (a, v) in self.avg.iter_mut().zip(x) {
            *a += w * (v - *a);
        }
    }

    /// The average so far, or `current` if no iterate has been averaged yet.
    pub fn output<'a>(&'a self, current: &'a [f64]) -> &'a [f64] {
        if self.count == 0 {
            current
        } else {
            &self.avg
        }
    }
}

/// Mean of the last `⌈T/k⌉` of `T` iterates.
pub fn suffix_average(iterates: &[Vec<f64>], k: usize) -> Vec<f64> {
    let dim = iterates.first().map_or(0, Vec::len);
    let mut avg = Averager::new(Averaging::Suffix(k), iterates.len(), dim);
    for (t, x) in iterates.iter().enumerate() {
        avg.push(t + 1, x);
    }
    avg.output(&[]).to_vec()
}

struct Recorder {
    every: usize,
    total: usize,
    start: Instant,
    trace: RunTrace,
}

impl Recorder {
    fn new(cfg: &SgmConfig) -> Self {
        Self {
            every: cfg.eval_every(),
            total: cfg.iterations,
            start: Instant::now(),
            trace: RunTrace::default(),
        }
    }

    fn maybe_record<O: StochasticGradient + ?Sized>(
        &mut self,
        oracle: &O,
        t: usize,
        evals: u64,
        x: &[f64],
        fallback: f64,
        step: f64,
    ) {
        if t.is_multiple_of(self.every) || t == self.total {
            self.trace.records.push(TraceRecord {
                iter: t,
                grad_evals: evals,
                value: oracle.evaluate(x).unwrap_or(fallback),
                step_size: step,
                wall_ms: self.start.elapsed().as_millis() as u64,
            });
        }
    }
}

fn checked(out: EstimatorOutput, t: usize) -> Result<EstimatorOutput> {
    if let Some(i) = out.grad.iter().position(|g| !g.is_finite()) {
        return Err(DroError::NonFinite {
            iteration: t,
            what: format!("gradient coordinate {i}"),
        });
    }
    Ok(out)
}

/// Dispatches on `cfg.momentum`.
pub fn run<O: StochasticGradient + ?Sized>(
    oracle: &O,
    x0: Vec<f64>,
    cfg: &SgmConfig,
    stream: &RngStream,
) -> Result<(Vec<f64>, RunTrace)> {
    match cfg.momentum {
        Momentum::None => run_sgm(oracle, x0, cfg, stream),
        _ => run_nesterov(oracle, x0, cfg, stream),
    }
}

/// Projected SGM `x_{t+1} = Π(x_t - η g(x_t))`. Iteration `t` draws its
/// randomness from `stream.derive(t)`.
pub fn run_sgm<O: StochasticGradient + ?Sized>(
    oracle: &O,
    x0: Vec<f64>,
    cfg: &SgmConfig,
    stream: &RngStream,
) -> Result<(Vec<f64>, RunTrace)> {
    cfg.validate()?;
    check_dim(oracle, &x0)?;
    let mut x = x0;
    project(&mut x, cfg.radius);
    let mut avg = Averager::new(cfg.averaging, cfg.iterations, x.len());
    let mut rec = Recorder::new(cfg);
    let mut evals = 0u64;
    for t in 1..=cfg.iterations {
        let out = checked(oracle.estimate(&x, &mut stream.derive(t as u64))?, t)?;
        evals += out.grad_evals;
        for (xi, g) in x.iter_mut().zip(&out.grad) {
            *xi -= cfg.step_size * g;
        }
        project(&mut x, cfg.radius);
        avg.push(t, &x);
        rec.maybe_record(oracle, t, evals, avg.output(&x), out.value_estimate, cfg.step_size);
    }
    Ok((avg.output(&x).to_vec(), rec.trace))
}

/// Accelerated SGM.
///
/// With [`Momentum::NesterovTheta`]:
/// `z_{t+1} = Π(z_t - (η/θ_t) g(x_t))`, `y_{t+1} = θ_t z_{t+1} + (1-θ_t) y_t`,
/// `x_{t+1} = θ_{t+1} z_{t+1} + (1-θ_{t+1}) y_{t+1}`; the output is built from
/// the `y` sequence.
///
/// With [`Momentum::Constant`]`(ω)`:
/// `v_{t+1} = ω v_t - η g(x_t)`, `x_{t+1} = Π(x_t + ω v_{t+1} - η g(x_t))`.
pub fn run_nesterov<O: StochasticGradient + ?Sized>(
    oracle: &O,
    x0: Vec<f64>,
    cfg: &SgmConfig,
    stream: &RngStream,
) -> Result<(Vec<f64>, RunTrace)> {
    cfg.validate()?;
    check_dim(oracle, &x0)?;
    let eta = cfg.step_size;
    let mut x = x0;
    project(&mut x, cfg.radius);
    let mut avg = Averager::new(cfg.averaging, cfg.iterations, x.len());
    let mut rec = Recorder::new(cfg);
    let mut evals = 0u64;
    match cfg.momentum {
        Momentum::NesterovTheta => {
            let mut z = x.clone();
            let mut y = x.clone();
            for t in 1..=cfg.iterations {
                let out = checked(oracle.estimate(&x, &mut stream.derive(t as u64))?, t)?;
                evals += out.grad_evals;
                let th = theta(t);
                for (zi, g) in z.iter_mut().zip(&out.grad) {
                    *zi -= eta / th * g;
                }
                project(&mut z, cfg.radius);
                for (yi, zi) in y.iter_mut().zip(&z) {
                    *yi = th * zi + (1.0 - th) * *yi;
                }
                let next = theta(t + 1);
                for ((xi, zi), yi) in x.iter_mut().zip(&z).zip(&y) {
                    *xi = next * zi + (1.0 - next) * yi;
                }
                avg.push(t, &y);
                rec.maybe_record(oracle, t, evals, avg.output(&y), out.value_estimate, eta);
            }
            Ok((avg.output(&y).to_vec(), rec.trace))
        }
        Momentum::Constant(_) | Momentum::None => {
            let w = match cfg.momentum {
                Momentum::Constant(w) => w,
                _ => 0.0,
            };
            let mut v = vec![0.0; x.len()];
            for t in 1..=cfg.iterations {
                let out = checked(oracle.estimate(&x, &mut stream.derive(t as u64))?, t)?;
                evals += out.grad_evals;
                for ((vi, xi), g) in v.iter_mut().zip(x.iter_mut()).zip(&out.grad) {
                    *vi = w * *vi - eta * g;
                    *xi += w * *vi - eta * g;
                }
                project(&mut x, cfg.radius);
                avg.push(t, &x);
                rec.maybe_record(oracle, t, evals, avg.output(&x), out.value_estimate, eta);
            }
            Ok((avg.output(&x).to_vec(), rec.trace))
        }
    }
}

/// `θ_t = 2/(t+1)`.
pub fn theta(t: usize) -> f64 {
    2.0 / (t as f64 + 1.0)
}

fn check_dim<O: StochasticGradient + ?Sized>(oracle: &O, x0: &[f64]) -> Result<()> {
    if x0.len() != oracle.dim() {
        return Err(DroError::param(
            "x0",
            format!("initial point has dimension {}, problem has {}", x0.len(), oracle.dim()),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    Sgm,
    Agm,
}

/// Step sizes with unit constants: `R / (√T Γ)` for SGM and
/// `min(1/Λ, R / (T^{3/2} σ))` for the accelerated method (`Λ = ∞` allowed).
pub fn theoretical_step_size(kind: MethodKind, r: f64, gamma: f64, t: usize, sigma: f64, lambda: f64) -> f64 {
    let t = t as f64;
    match kind {
        MethodKind::Sgm => r / (t.sqrt() * gamma),
        MethodKind::Agm if lambda.is_finite() => (1.0 / lambda).min(r / (t.powf(1.5) * sigma)),
        MethodKind::Agm => r / (t.powf(1.5) * sigma),
    }
}

/// Settings for SGM on the joint dual `(x, η)` objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualSgmConfig {
    pub sgm: SgmConfig,
    pub eta_step_size: f64,
    pub eta0: f64,
    /// Interval for `η`; defaults to `[0, B]` (CVaR) or `[-λ, B]` (χ²-penalty).
    pub eta_bounds: Option<(f64, f64)>,
}

/// Stochastic gradient descent on `Υ(x, η) = E[λψ*((loss - η)/λ)] + η`
/// (or its CVaR analogue) with one sample per step. Returns the averaged `x`,
/// averaged `η` and a trace of the exact robust objective at the averaged `x`.
pub fn run_dual_sgm<P: Problem + ?Sized>(
    problem: &P,
    spec: &RobustSpec,
    x0: Vec<f64>,
    cfg: &DualSgmConfig,
    stream: &RngStream,
) -> Result<(Vec<f64>, f64, RunTrace)> {
    let sgm = &cfg.sgm;
    sgm.validate()?;
    let (lo, hi) = match (cfg.eta_bounds, spec) {
        (Some(b), _) => b,
        (None, RobustSpec::Cvar { .. }) => (0.0, problem.bound_b().unwrap_or(f64::INFINITY)),
        (None, RobustSpec::Chi2Pen { lambda }) => (-lambda, problem.bound_b().unwrap_or(f64::INFINITY)),
        (None, _) => return Err(DroError::Unsupported(format!("dual SGM with {spec}"))),
    };
    let mut x = x0;
    project(&mut x, sgm.radius);
    let mut eta = cfg.eta0.clamp(lo, hi);
    let mut avg = Averager::new(sgm.averaging, sgm.iterations, x.len());
    let mut eta_avg = Averager::new(sgm.averaging, sgm.iterations, 1);
    let mut rec = Recorder::new(sgm);
    let objective = DualEval { problem, spec: *spec };
    for t in 1..=sgm.iterations {
        let (gx, ge) = dual_sgm_grad(problem, &x, eta, spec, &mut stream.derive(t as u64))?;
        if gx.iter().any(|g| !g.is_finite()) || !ge.is_finite() {
            return Err(DroError::NonFinite {
                iteration: t,
                what: "dual gradient".into(),
            });
        }
        for (xi, g) in x.iter_mut().zip(&gx) {
            *xi -= sgm.step_size * g;
        }
        project(&mut x, sgm.radius);
        eta = (eta - cfg.eta_step_size * ge).clamp(lo, hi);
        avg.push(t, &x);
        eta_avg.push(t, &[eta]);
        rec.maybe_record(&objective, t, t as u64, avg.output(&x), f64::NAN, sgm.step_size);
    }
    let eta_out = eta_avg.output(&[eta])[0];
    Ok((avg.output(&x).to_vec(), eta_out, rec.trace))
}

struct DualEval<'a, P: ?Sized> {
    problem: &'a P,
    spec: RobustSpec,
}

impl<P: Problem + ?Sized> StochasticGradient for DualEval<'_, P> {
    fn dim(&self) -> usize {
        self.problem.dim()
    }
    fn estimate(&self, _x: &[f64], _stream: &mut RngStream) -> Result<EstimatorOutput> {
        Err(DroError::Unsupported("estimation through the evaluation wrapper".into()))
    }
    fn evaluate(&self, x: &[f64]) -> Option<f64> {
        full_batch(self.problem, x, &self.spec).ok().map(|s| s.value)
    }
}
