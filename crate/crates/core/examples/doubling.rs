//! χ²-constrained DRO through the λ-doubling scheme: one joint (x, λ) run
//! per interval, then selection by a large-batch estimate.

use dro::doubling::{default_sgm, doubling_minimize, lambda_intervals, DoublingConfig};
use dro::estimators::MlmcConfig;
use dro::oracle::full_batch;
use dro::problems::synthetic_logistic;
use dro::{Problem, RngStream, RobustSpec};

fn main() -> dro::Result<()> {
    let (rho, eps) = (1.0, 0.05);
    let p = synthetic_logistic(200, 5, 10.0, 0)?;
    let b = p.bound_b().expect("bounded loss");
    println!("B = {b:.3}, {} intervals", lambda_intervals(b, rho, eps)?.len());
    let cfg = DoublingConfig::new(rho, eps, b, default_sgm(1.0, 5_000, p.radius()), MlmcConfig::new(10, 160)?);
    let (x, report) = doubling_minimize(&p, &cfg, &RngStream::new(0))?;
    let spec = RobustSpec::chi2_con(rho)?;
    for r in &report.intervals {
        println!(
            "[{:7.4}, {:7.4}]  lambda {:.4}  estimate {:.4}  exact {:.4}{}",
            r.lo,
            r.hi,
            r.lambda_hat,
            r.estimate,
            full_batch(&p, &r.x_bar, &spec)?.value,
            if r.index == report.selected + 1 { "  <- selected" } else { "" }
        );
    }
    println!(
        "L(x) = {:.4}, {} gradient and {} value evaluations",
        full_batch(&p, &x, &spec)?.value,
        report.total_grad_evals,
        report.total_value_evals
    );
    Ok(())
}
