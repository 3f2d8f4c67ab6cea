//! The multilevel estimator matches a large batch in expectation at a
//! fraction of the cost.

use dro::estimators::{mlmc_estimate, MlmcConfig, MlmcTarget};
use dro::oracle::bernoulli_surrogate;
use dro::problems::bernoulli_linear;
use dro::stats::mean_stderr;
use dro::{RngStream, RobustSpec};

fn main() -> dro::Result<()> {
    let spec = RobustSpec::cvar(0.1)?;
    let p = bernoulli_linear(0.1, 1.0, 1.0)?;
    let stream = RngStream::new(7);
    for (n0, n) in [(10, 160), (10, 1280), (20, 2560)] {
        let cfg = MlmcConfig::new(n0, n)?;
        let (values, costs): (Vec<f64>, Vec<f64>) = (0..50_000u64)
            .map(|r| {
                mlmc_estimate(&p, &[1.0], &spec, &cfg, MlmcTarget::Value, &mut stream.derive(r))
                    .map(|o| (o.value_estimate, o.grad_evals as f64))
            })
            .collect::<dro::Result<Vec<_>>>()?
            .into_iter()
            .unzip();
        let v = mean_stderr(&values);
        let c = mean_stderr(&costs);
        let exact = bernoulli_surrogate(&spec, 0.1, n as u64, 1.0)?;
        println!(
            "n0={n0:>3} n={n:>5}: estimate {:.4} ± {:.4} (batch-{n} value {exact:.4}), cost {:.1} vs {}",
            v.mean,
            v.stderr,
            c.mean,
            cfg.expected_cost()
        );
    }
    Ok(())
}
