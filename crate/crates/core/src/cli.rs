//! Command-line experiment runner.
//!
//! Every subcommand reads a JSON config (a single object or a list of
//! objects) and writes CSV/JSON files into the output directory.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::doubling::{doubling_minimize, DoublingConfig};
use crate::error::{DroError, Result};
use crate::estimators::{
    level_distribution, mlmc_estimate, mlmc_level_estimate, EstimatorKind, MlmcConfig, MlmcTarget,
};
use crate::objective::RobustSpec;
use crate::optim::{self, Averaging, DualSgmConfig, Momentum, RobustObjective, RunTrace, SgmConfig};
use crate::oracle::{full_batch, mc_bias_estimate};
use crate::problems::{
    binary_logistic, bernoulli_linear, cvar_lecam, load_dataset_csv, multiclass_logistic, point_mass,
    synthetic_logistic, three_point_hard, Problem,
};
use crate::rng::RngStream;
use crate::stats::{loglog_slope, mean_stderr};
use crate::verify::{run_suite, VerifyOptions};

#[derive(Debug, Parser)]
#[command(name = "dro", version, about = "Distributionally robust optimization experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Optimize the configured objective and write a trace.
    Run(RunArgs),
    /// Monte Carlo bias of the mini-batch objective over a grid of batch sizes.
    BiasSweep(RunArgs),
    /// Cost, unbiasedness and second-moment growth of the MLMC estimator.
    EstimatorBench(RunArgs),
    /// Run the built-in property suite.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `output.dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Coarse-to-fine step-size search before the final run.
    #[arg(long)]
    pub tune: bool,
    /// Worker threads for lists of configs.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, hide = true, default_value_t = 0.0)]
    pub perturb: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub seed: u64,
    pub problem: ProblemConfig,
    pub objective: RobustSpec,
    #[serde(default)]
    pub estimator: Option<EstimatorConfig>,
    #[serde(default)]
    pub optimizer: Option<OptimizerConfig>,
    #[serde(default)]
    pub output: OutputConfig,
    /// Best known objective value, for `epochs_to_2pct`.
    #[serde(default)]
    pub reference_value: Option<f64>,
    #[serde(default)]
    pub sweep: Option<SweepConfig>,
    #[serde(default)]
    pub bench: Option<BenchConfig>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProblemConfig {
    Bernoulli {
        p0: f64,
        #[serde(default = "one")]
        b: f64,
        #[serde(default = "one")]
        radius: f64,
    },
    LeCam {
        alpha: f64,
        delta: f64,
        #[serde(default = "one")]
        g: f64,
        #[serde(default = "one")]
        radius: f64,
        #[serde(default = "default_v")]
        v: i8,
    },
    ThreePoint {
        rho: f64,
        n: usize,
        #[serde(default = "one")]
        g: f64,
    },
    PointMass {
        target: Vec<f64>,
        #[serde(default = "one")]
        curvature: f64,
        #[serde(default)]
        radius: Option<f64>,
    },
    SyntheticLogistic {
        #[serde(default = "default_n")]
        n: usize,
        #[serde(default = "default_d")]
        d: usize,
        #[serde(default = "one")]
        radius: f64,
        #[serde(default)]
        data_seed: u64,
    },
    LogisticCsv {
        path: PathBuf,
        #[serde(default = "one")]
        radius: f64,
        #[serde(default)]
        mu: f64,
    },
    MulticlassCsv {
        path: PathBuf,
        #[serde(default = "one")]
        radius: f64,
        #[serde(default)]
        mu: f64,
        #[serde(default)]
        bound_b: Option<f64>,
    },
}

fn default_v() -> i8 {
    1
}
fn default_n() -> usize {
    200
}
fn default_d() -> usize {
    5
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum EstimatorConfig {
    Minibatch {
        n: usize,
    },
    Mlmc {
        n0: usize,
        n_cap: usize,
    },
    DualSgm {
        #[serde(default)]
        eta_step_size: Option<f64>,
        #[serde(default)]
        eta0: f64,
    },
}

/// Either a constant `ω` or the string `"theta"`.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum MomentumSetting {
    Constant(f64),
    Schedule(String),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    Sgm {
        step_size: f64,
        iterations: usize,
        #[serde(default)]
        averaging: Averaging,
        /// Defaults to the problem's own radius.
        #[serde(default)]
        radius: Option<f64>,
        #[serde(default = "default_eval_points")]
        eval_points: usize,
    },
    Nesterov {
        step_size: f64,
        iterations: usize,
        #[serde(default)]
        momentum: Option<MomentumSetting>,
        #[serde(default)]
        averaging: Averaging,
        #[serde(default)]
        radius: Option<f64>,
        #[serde(default = "default_eval_points")]
        eval_points: usize,
    },
    Doubling {
        step_size: f64,
        iterations: usize,
        epsilon: f64,
        #[serde(default = "default_full")]
        averaging: Averaging,
        #[serde(default)]
        radius: Option<f64>,
        #[serde(default)]
        lambda_step_size: Option<f64>,
        #[serde(default)]
        bound_b: Option<f64>,
        #[serde(default = "default_reps")]
        selection_reps: usize,
        #[serde(default = "default_eval_points")]
        eval_points: usize,
    },
}

fn default_eval_points() -> usize {
    200
}
fn default_full() -> Averaging {
    Averaging::Full
}
fn default_reps() -> usize {
    9
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_dir")]
    pub dir: PathBuf,
    /// Record real elapsed milliseconds; off by default so traces are reproducible.
    #[serde(default)]
    pub wall_clock: bool,
}

fn default_dir() -> PathBuf {
    PathBuf::from("out")
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: default_dir(),
            wall_clock: false,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub ns: Vec<usize>,
    #[serde(default = "default_sweep_reps")]
    pub reps: usize,
    #[serde(default)]
    pub x: Option<Vec<f64>>,
}

fn default_sweep_reps() -> usize {
    50_000
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    pub n0: usize,
    pub n_cap: usize,
    #[serde(default = "default_bench_reps")]
    pub reps: usize,
    /// Draws per level for the stratified second moments.
    #[serde(default = "default_moment_reps")]
    pub moment_reps: usize,
    #[serde(default)]
    pub x: Option<Vec<f64>>,
}

fn default_bench_reps() -> usize {
    100_000
}
fn default_moment_reps() -> usize {
    2_000
}

/// Summary written next to each trace.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Summary {
    pub final_value: f64,
    pub grad_evals: u64,
    pub wall_ms: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs_to_2pct: Option<f64>,
    pub step_size: f64,
    pub x: Vec<f64>,
}

const TAGS: [(&str, &str, &[&str]); 4] = [
    ("/problem", "type", &[
        "bernoulli",
        "le_cam",
        "three_point",
        "point_mass",
        "synthetic_logistic",
        "logistic_csv",
        "multiclass_csv",
    ]),
    ("/objective", "kind", &["cvar", "kl_cvar", "chi2_pen", "chi2_con"]),
    ("/estimator", "type", &["minibatch", "mlmc", "dual_sgm"]),
    ("/optimizer", "type", &["sgm", "nesterov", "doubling"]),
];

fn config_err(pointer: impl Into<String>, reason: impl Into<String>) -> DroError {
    DroError::Config {
        pointer: pointer.into(),
        reason: reason.into(),
    }
}

fn check_tags(entry: &Value, prefix: &str) -> Result<()> {
    for (section, tag, allowed) in TAGS {
        let Some(obj) = entry.pointer(section) else { continue };
        let pointer = format!("{prefix}{section}/{tag}");
        match obj.get(tag) {
            None => return Err(config_err(pointer, "missing")),
            Some(Value::String(s)) if allowed.contains(&s.as_str()) => {}
            Some(v) => {
                return Err(config_err(pointer, format!("unknown value {v}; expected one of {}", allowed.join(", "))))
            }
        }
    }
    Ok(())
}

fn pointer_of(path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment;
    path.iter()
        .filter_map(|seg| match seg {
            Segment::Seq { index } => Some(index.to_string()),
            Segment::Map { key } => Some(key.clone()),
            Segment::Enum { variant } => Some(variant.clone()),
            Segment::Unknown => None,
        })
        .map(|s| format!("/{}", s.replace('~', "~0").replace('/', "~1")))
        .collect()
}

/// Parses a config document into one or more runs. Relative data paths are
/// resolved against `base`.
pub fn parse_config(text: &str, base: &Path) -> Result<Vec<RunConfig>> {
    let value: Value = serde_json::from_str(text).map_err(|e| config_err("", e.to_string()))?;
    let (entries, list) = match value {
        Value::Array(items) => (items, true),
        other => (vec![other], false),
    };
    entries
        .into_iter()
        .enumerate()
        .map(|(i, entry)| {
            let prefix = if list { format!("/{i}") } else { String::new() };
            check_tags(&entry, &prefix)?;
            let mut cfg: RunConfig = serde_path_to_error::deserialize(entry)
                .map_err(|e| config_err(format!("{prefix}{}", pointer_of(e.path())), e.inner().to_string()))?;
            cfg.objective.validate().map_err(|e| match e {
                DroError::InvalidParameter { name, reason } => config_err(format!("{prefix}/objective/{name}"), reason),
                other => config_err(format!("{prefix}/objective"), other.to_string()),
            })?;
            match &mut cfg.problem {
                ProblemConfig::LogisticCsv { path, .. } | ProblemConfig::MulticlassCsv { path, .. } if path.is_relative() => {
                    *path = base.join(&*path);
                }
                _ => {}
            }
            Ok(cfg)
        })
        .collect()
}

pub fn load_config(path: &Path) -> Result<Vec<RunConfig>> {
    let text = fs::read_to_string(path)?;
    parse_config(&text, path.parent().unwrap_or(Path::new(".")))
}

/// Builds the configured problem; `n_override` replaces the batch-size
/// parameter of instances that depend on it.
pub fn build_problem(cfg: &ProblemConfig, n_override: Option<usize>) -> Result<Box<dyn Problem>> {
    let problem: Box<dyn Problem> = match cfg {
        ProblemConfig::Bernoulli { p0, b, radius } => Box::new(bernoulli_linear(*p0, *b, *radius)?),
        ProblemConfig::LeCam {
            alpha,
            delta,
            g,
            radius,
            v,
        } => Box::new(cvar_lecam(*g, *radius, *alpha, *delta, *v)?),
        ProblemConfig::ThreePoint { rho, n, g } => Box::new(three_point_hard(*rho, *g, n_override.unwrap_or(*n))?),
        ProblemConfig::PointMass {
            target,
            curvature,
            radius,
        } => Box::new(point_mass(target.clone(), *curvature, *radius)?),
        ProblemConfig::SyntheticLogistic { n, d, radius, data_seed } => {
            Box::new(synthetic_logistic(*n, *d, *radius, *data_seed)?)
        }
        ProblemConfig::LogisticCsv { path, radius, mu } => Box::new(binary_logistic(load_dataset_csv(path)?, *mu, *radius)?),
        ProblemConfig::MulticlassCsv {
            path,
            radius,
            mu,
            bound_b,
        } => {
            let p = multiclass_logistic(load_dataset_csv(path)?, *mu, *radius)?;
            Box::new(match bound_b {
                Some(b) => p.with_bound_b(*b),
                None => p,
            })
        }
    };
    Ok(problem)
}

fn estimator_kind(cfg: &RunConfig) -> Result<EstimatorKind> {
    match cfg.estimator {
        Some(EstimatorConfig::Minibatch { n }) => Ok(EstimatorKind::Minibatch { n }),
        Some(EstimatorConfig::Mlmc { n0, n_cap }) => Ok(EstimatorKind::Mlmc { n0, n_cap }),
        Some(EstimatorConfig::DualSgm { .. }) => Err(config_err("/estimator/type", "dual_sgm has no batch estimator")),
        None => Err(config_err("/estimator", "missing")),
    }
}

fn sgm_config(opt: &OptimizerConfig, estimator: Option<EstimatorConfig>) -> Result<SgmConfig> {
    let cfg = match opt {
        OptimizerConfig::Sgm {
            step_size,
            iterations,
            averaging,
            radius,
            eval_points,
        } => SgmConfig {
            step_size: *step_size,
            iterations: *iterations,
            momentum: Momentum::None,
            averaging: *averaging,
            radius: *radius,
            eval_points: *eval_points,
        },
        OptimizerConfig::Nesterov {
            step_size,
            iterations,
            momentum,
            averaging,
            radius,
            eval_points,
        } => {
            let momentum = match momentum {
                Some(MomentumSetting::Constant(w)) => Momentum::Constant(*w),
                Some(MomentumSetting::Schedule(s)) if s == "theta" => Momentum::NesterovTheta,
                Some(MomentumSetting::Schedule(s)) => {
                    return Err(config_err("/optimizer/momentum", format!("expected a number or \"theta\", got {s:?}")))
                }
                None => match estimator {
                    Some(EstimatorConfig::Mlmc { .. }) => Momentum::Constant(0.0),
                    _ => Momentum::Constant(0.9),
                },
            };
            SgmConfig {
                step_size: *step_size,
                iterations: *iterations,
                momentum,
                averaging: *averaging,
                radius: *radius,
                eval_points: *eval_points,
            }
        }
        OptimizerConfig::Doubling {
            step_size,
            iterations,
            averaging,
            radius,
            eval_points,
            ..
        } => SgmConfig {
            step_size: *step_size,
            iterations: *iterations,
            momentum: Momentum::None,
            averaging: *averaging,
            radius: *radius,
            eval_points: *eval_points,
        },
    };
    cfg.validate().map_err(|e| match e {
        DroError::InvalidParameter { name, reason } => config_err(format!("/optimizer/{name}"), reason),
        other => other,
    })?;
    Ok(cfg)
}

/// Output of one optimization run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub x: Vec<f64>,
    pub trace: RunTrace,
    pub summary: Summary,
}

fn with_step(opt: &OptimizerConfig, step: f64) -> OptimizerConfig {
    let mut opt = opt.clone();
    match &mut opt {
        OptimizerConfig::Sgm { step_size, .. }
        | OptimizerConfig::Nesterov { step_size, .. }
        | OptimizerConfig::Doubling { step_size, .. } => *step_size = step,
    }
    opt
}

fn step_of(opt: &OptimizerConfig) -> f64 {
    match opt {
        OptimizerConfig::Sgm { step_size, .. }
        | OptimizerConfig::Nesterov { step_size, .. }
        | OptimizerConfig::Doubling { step_size, .. } => *step_size,
    }
}

/// Runs one configured optimization without touching the filesystem.
pub fn execute_run(cfg: &RunConfig, problem: &dyn Problem) -> Result<RunOutcome> {
    let opt = cfg.optimizer.as_ref().ok_or_else(|| config_err("/optimizer", "missing"))?;
    let stream = RngStream::new(cfg.seed);
    let started = Instant::now();
    let mut sgm = sgm_config(opt, cfg.estimator)?;
    sgm.radius = sgm.radius.or(problem.radius());
    let (x, trace, final_value) = match (opt, cfg.estimator) {
        (OptimizerConfig::Doubling {
            epsilon,
            lambda_step_size,
            bound_b,
            selection_reps,
            ..
        }, est) => {
            let RobustSpec::Chi2Con { rho } = cfg.objective else {
                return Err(config_err("/objective/kind", "the doubling optimizer needs chi2_con"));
            };
            let Some(EstimatorConfig::Mlmc { n0, n_cap }) = est else {
                return Err(config_err("/estimator", "the doubling optimizer needs an mlmc estimator"));
            };
            let b = bound_b
                .or_else(|| problem.bound_b())
                .ok_or_else(|| config_err("/optimizer/bound_b", "problem has no known loss bound"))?;
            let mut dcfg = DoublingConfig::new(rho, *epsilon, b, sgm, MlmcConfig::rounded(n0, n_cap)?);
            dcfg.lambda_step_size = *lambda_step_size;
            dcfg.selection_reps = *selection_reps;
            let (x, report) = doubling_minimize(problem, &dcfg, &stream)?;
            // intervals one after another, with cumulative evaluation counts
            let mut trace = RunTrace::default();
            let mut offset = 0;
            for r in &report.intervals {
                trace.records.extend(r.trace.records.iter().map(|rec| optim::TraceRecord {
                    grad_evals: rec.grad_evals + offset,
                    ..rec.clone()
                }));
                offset += r.grad_evals;
            }
            let value = exact_or(problem, &x, &cfg.objective, &trace);
            (x, trace, value)
        }
        (_, Some(EstimatorConfig::DualSgm { eta_step_size, eta0 })) => {
            let dcfg = DualSgmConfig {
                eta_step_size: eta_step_size.unwrap_or(sgm.step_size),
                sgm,
                eta0,
                eta_bounds: None,
            };
            let (x, _eta, trace) = optim::run_dual_sgm(problem, &cfg.objective, problem.initial_point(), &dcfg, &stream)?;
            let value = exact_or(problem, &x, &cfg.objective, &trace);
            (x, trace, value)
        }
        _ => {
            let oracle = RobustObjective::new(problem, cfg.objective, estimator_kind(cfg)?);
            let (x, trace) = optim::run(&oracle, problem.initial_point(), &sgm, &stream)?;
            let value = exact_or(problem, &x, &cfg.objective, &trace);
            (x, trace, value)
        }
    };
    let wall_ms = started.elapsed().as_millis() as u64;
    let trace = if cfg.output.wall_clock {
        trace
    } else {
        RunTrace {
            records: trace
                .records
                .into_iter()
                .map(|r| optim::TraceRecord { wall_ms: 0, ..r })
                .collect(),
        }
    };
    let epochs_to_2pct = match (cfg.reference_value, problem.support()) {
        (Some(reference), Some(support)) => trace
            .first_within(reference, 0.02)
            .map(|r| r.grad_evals as f64 / support.len() as f64),
        _ => None,
    };
    let summary = Summary {
        final_value,
        grad_evals: trace.total_grad_evals(),
        wall_ms: if cfg.output.wall_clock { wall_ms } else { 0 },
        epochs_to_2pct,
        step_size: step_of(opt),
        x: x.clone(),
    };
    Ok(RunOutcome { x, trace, summary })
}

fn exact_or(problem: &dyn Problem, x: &[f64], spec: &RobustSpec, trace: &RunTrace) -> f64 {
    full_batch(problem, x, spec)
        .map(|s| s.value)
        .unwrap_or_else(|_| trace.final_value().unwrap_or(f64::NAN))
}

/// Coarse grid over `10^-5..10^0`, then `{η/2, η, 2η}` around the best;
/// selection by final value.
pub fn tune_step_size(cfg: &RunConfig, problem: &dyn Problem) -> Result<f64> {
    let opt = cfg.optimizer.as_ref().ok_or_else(|| config_err("/optimizer", "missing"))?;
    let score = |step: f64| -> f64 {
        let trial = RunConfig {
            optimizer: Some(with_step(opt, step)),
            ..cfg.clone()
        };
        match execute_run(&trial, problem) {
            Ok(out) if out.summary.final_value.is_finite() => out.summary.final_value,
            _ => f64::INFINITY,
        }
    };
    let best_of = |steps: Vec<f64>| -> (f64, f64) {
        steps
            .into_iter()
            .map(|s| (s, score(s)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("non-empty grid")
    };
    let (coarse, _) = best_of((0..=5).map(|k| 10f64.powi(-k)).collect());
    let (fine, value) = best_of(vec![coarse / 2.0, coarse, coarse * 2.0]);
    if !value.is_finite() {
        return Err(DroError::NonFinite {
            iteration: 0,
            what: "every tuned step size diverged".into(),
        });
    }
    log::info!("tuned step size {fine} (value {value})");
    Ok(fine)
}

pub fn write_trace_csv(trace: &RunTrace, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["iter", "grad_evals", "value", "step_size", "wall_ms"])?;
    for r in &trace.records {
        w.serialize((r.iter, r.grad_evals, r.value, r.step_size, r.wall_ms))?;
    }
    w.flush()?;
    Ok(())
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Seeds, names and output directories for every entry of a config file.
fn prepare(args: &RunArgs) -> Result<Vec<(RunConfig, String)>> {
    let mut configs = load_config(&args.config)?;
    let list = configs.len() > 1;
    for (i, cfg) in configs.iter_mut().enumerate() {
        if let Some(seed) = args.seed {
            cfg.seed = if list { RngStream::new(seed).derive(i as u64).key() } else { seed };
        }
        if let Some(out) = &args.out {
            cfg.output.dir = out.clone();
        }
    }
    Ok(configs
        .into_iter()
        .enumerate()
        .map(|(i, cfg)| {
            let prefix = match (&cfg.name, list) {
                (Some(name), _) => format!("{name}_"),
                (None, true) => format!("run{i}_"),
                (None, false) => String::new(),
            };
            (cfg, prefix)
        })
        .collect())
}

fn for_each_entry<F>(args: &RunArgs, f: F) -> Result<()>
where
    F: Fn(&RunConfig, &str) -> Result<()> + Sync,
{
    let entries = prepare(args)?;
    for (cfg, _) in &entries {
        fs::create_dir_all(&cfg.output.dir)?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.jobs.max(1))
        .build()
        .map_err(|e| DroError::param("jobs", e.to_string()))?;
    pool.install(|| entries.par_iter().map(|(cfg, prefix)| f(cfg, prefix)).collect::<Result<Vec<()>>>())?;
    Ok(())
}

pub fn cmd_run(args: &RunArgs) -> Result<()> {
    for_each_entry(args, |cfg, prefix| {
        let problem = build_problem(&cfg.problem, None)?;
        let cfg = if args.tune {
            let step = tune_step_size(cfg, problem.as_ref())?;
            RunConfig {
                optimizer: cfg.optimizer.as_ref().map(|o| with_step(o, step)),
                ..cfg.clone()
            }
        } else {
            cfg.clone()
        };
        let out = execute_run(&cfg, problem.as_ref())?;
        let dir = &cfg.output.dir;
        write_trace_csv(&out.trace, &dir.join(format!("{prefix}trace.csv")))?;
        write_json(&out.summary, &dir.join(format!("{prefix}summary.json")))?;
        println!(
            "{}{}: final_value={:.6} grad_evals={}",
            prefix,
            problem.name(),
            out.summary.final_value,
            out.summary.grad_evals
        );
        Ok(())
    })
}

/// One row of the bias sweep.
#[derive(Debug, Clone, Copy, Serialize, PartialEq)]
pub struct BiasRow {
    pub n: usize,
    pub bias_mean: f64,
    pub bias_stderr: f64,
}

pub fn bias_sweep(cfg: &RunConfig, problem: &dyn Problem) -> Result<Vec<BiasRow>> {
    let sweep = cfg.sweep.as_ref().ok_or_else(|| config_err("/sweep", "missing"))?;
    let x = sweep.x.clone().unwrap_or_else(|| problem.initial_point());
    let exact = full_batch(problem, &x, &cfg.objective)?.value;
    let stream = RngStream::new(cfg.seed);
    sweep
        .ns
        .iter()
        .map(|&n| {
            let m = mc_bias_estimate(problem, &x, &cfg.objective, n, sweep.reps, &stream.derive(n as u64))?;
            Ok(BiasRow {
                n,
                bias_mean: exact - m.mean,
                bias_stderr: m.stderr,
            })
        })
        .collect()
}

pub fn cmd_bias_sweep(args: &RunArgs) -> Result<()> {
    for_each_entry(args, |cfg, prefix| {
        let problem = build_problem(&cfg.problem, None)?;
        let rows = bias_sweep(cfg, problem.as_ref())?;
        let mut w = csv::Writer::from_path(cfg.output.dir.join(format!("{prefix}bias.csv")))?;
        for r in &rows {
            w.serialize(r)?;
        }
        w.flush()?;
        let positive: Vec<&BiasRow> = rows.iter().filter(|r| r.bias_mean > 0.0).collect();
        if positive.len() >= 2 {
            let ns: Vec<f64> = positive.iter().map(|r| r.n as f64).collect();
            let bs: Vec<f64> = positive.iter().map(|r| r.bias_mean).collect();
            println!("{prefix}log-log slope {:.3}", loglog_slope(&ns, &bs));
        }
        Ok(())
    })
}

/// Second moment of the MLMC gradient at one batch-size cap.
#[derive(Debug, Clone, Copy, Serialize, PartialEq)]
pub struct MomentRow {
    pub n: usize,
    pub second_moment: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct BenchReport {
    pub n0: usize,
    pub n_cap: usize,
    pub expected_cost: f64,
    pub mean_cost: f64,
    pub cost_stderr: f64,
    pub mlmc_value: f64,
    pub mlmc_stderr: f64,
    pub minibatch_value: f64,
    pub minibatch_stderr: f64,
    /// `|mlmc - minibatch|` in units of the combined standard error.
    pub gap_in_stderr: f64,
    pub moment_slope: f64,
    pub moments: Vec<MomentRow>,
}

/// Stratified estimate of `E‖M‖²` for the MLMC gradient with cap `n`:
/// `Σ_j q(j) E[‖M‖² | J = j]`.
pub fn mlmc_second_moment(
    problem: &dyn Problem,
    x: &[f64],
    spec: &RobustSpec,
    cfg: &MlmcConfig,
    reps: usize,
    stream: &RngStream,
) -> Result<(f64, f64)> {
    let mut mean = 0.0;
    let mut var = 0.0;
    for (j, q) in level_distribution(cfg) {
        let level = stream.derive(u64::from(j));
        let sq: Vec<f64> = (0..reps)
            .into_par_iter()
            .map(|r| {
                mlmc_level_estimate(problem, x, spec, cfg, MlmcTarget::Grad, j, &mut level.derive(r as u64))
                    .map(|o| o.grad.iter().map(|g| g * g).sum::<f64>())
            })
            .collect::<Result<_>>()?;
        let m = mean_stderr(&sq);
        mean += q * m.mean;
        var += (q * m.stderr).powi(2);
    }
    Ok((mean, var.sqrt()))
}

pub fn estimator_bench(cfg: &RunConfig) -> Result<BenchReport> {
    let bench = cfg.bench.as_ref().ok_or_else(|| config_err("/bench", "missing"))?;
    let mlmc = MlmcConfig::new(bench.n0, bench.n_cap).map_err(|e| config_err("/bench", e.to_string()))?;
    let stream = RngStream::new(cfg.seed);
    let problem = build_problem(&cfg.problem, Some(bench.n_cap))?;
    let x = bench.x.clone().unwrap_or_else(|| problem.initial_point());

    let runs: Vec<(f64, f64)> = (0..bench.reps)
        .into_par_iter()
        .map(|r| {
            mlmc_estimate(problem.as_ref(), &x, &cfg.objective, &mlmc, MlmcTarget::Value, &mut stream.derive(0).derive(r as u64))
                .map(|o| (o.value_estimate, o.grad_evals as f64))
        })
        .collect::<Result<_>>()?;
    let values: Vec<f64> = runs.iter().map(|r| r.0).collect();
    let costs: Vec<f64> = runs.iter().map(|r| r.1).collect();
    let mv = mean_stderr(&values);
    let mc = mean_stderr(&costs);
    let direct = mc_bias_estimate(problem.as_ref(), &x, &cfg.objective, mlmc.n(), bench.reps, &stream.derive(1))?;
    let combined = (mv.stderr.powi(2) + direct.stderr.powi(2)).sqrt();
    let gap = (mv.mean - direct.mean).abs();

    let moments: Vec<MomentRow> = (1..=mlmc.j_max())
        .map(|k| {
            let n = mlmc.n0() << k;
            let level_cfg = MlmcConfig::new(mlmc.n0(), n)?;
            let p = build_problem(&cfg.problem, Some(n))?;
            let (m, se) = mlmc_second_moment(p.as_ref(), &x, &cfg.objective, &level_cfg, bench.moment_reps, &stream.derive(2).derive(n as u64))?;
            Ok(MomentRow {
                n,
                second_moment: m,
                stderr: se,
            })
        })
        .collect::<Result<_>>()?;
    let ns: Vec<f64> = moments.iter().map(|m| m.n as f64).collect();
    let ms: Vec<f64> = moments.iter().map(|m| m.second_moment.max(f64::MIN_POSITIVE)).collect();
    let moment_slope = if moments.len() >= 2 && moments.iter().all(|m| m.second_moment > 0.0) {
        loglog_slope(&ns, &ms)
    } else {
        0.0
    };
    Ok(BenchReport {
        n0: mlmc.n0(),
        n_cap: mlmc.n(),
        expected_cost: mlmc.expected_cost(),
        mean_cost: mc.mean,
        cost_stderr: mc.stderr,
        mlmc_value: mv.mean,
        mlmc_stderr: mv.stderr,
        minibatch_value: direct.mean,
        minibatch_stderr: direct.stderr,
        gap_in_stderr: if combined > 0.0 { gap / combined } else if gap == 0.0 { 0.0 } else { f64::INFINITY },
        moment_slope,
        moments,
    })
}

pub fn cmd_estimator_bench(args: &RunArgs) -> Result<()> {
    for_each_entry(args, |cfg, prefix| {
        let report = estimator_bench(cfg)?;
        let dir = &cfg.output.dir;
        write_json(&report, &dir.join(format!("{prefix}bench.json")))?;
        let mut w = csv::Writer::from_path(dir.join(format!("{prefix}moments.csv")))?;
        for m in &report.moments {
            w.serialize(m)?;
        }
        w.flush()?;
        println!(
            "{prefix}mean cost {:.2} (expected {:.2}), gap {:.2} stderr, moment slope {:.3}",
            report.mean_cost, report.expected_cost, report.gap_in_stderr, report.moment_slope
        );
        Ok(())
    })
}

/// Prints the property table; returns whether every check passed.
pub fn cmd_verify(args: &VerifyArgs) -> bool {
    let results = run_suite(&VerifyOptions {
        perturb_inner: args.perturb,
    });
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(0);
    for r in &results {
        println!("{:<width$}  {}  {}", r.name, if r.passed { "PASS" } else { "FAIL" }, r.detail);
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    println!("{} checks, {} failed", results.len(), failed);
    failed == 0
}

fn exit_code(e: &DroError) -> i32 {
    match e {
        DroError::Config { .. } => 2,
        _ => 1,
    }
}

/// Parses `args` and runs the chosen subcommand; returns the process exit code.
pub fn main_from_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let result = match &cli.command {
        Command::Run(a) => cmd_run(a),
        Command::BiasSweep(a) => cmd_bias_sweep(a),
        Command::EstimatorBench(a) => cmd_estimator_bench(a),
        Command::Verify(a) => return if cmd_verify(a) { 0 } else { 1 },
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
