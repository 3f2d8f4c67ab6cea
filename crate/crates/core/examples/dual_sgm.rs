//! Single-sample SGM on the joint dual (x, η), compared with mini-batch SGM
//! on the primal objective at the same sample budget.

use dro::estimators::EstimatorKind;
use dro::optim::{run, run_dual_sgm, Averaging, DualSgmConfig, RobustObjective, SgmConfig};
use dro::oracle::full_batch;
use dro::problems::synthetic_logistic;
use dro::{Problem, RngStream, RobustSpec};

fn main() -> dro::Result<()> {
    let p = synthetic_logistic(200, 5, 10.0, 0)?;
    for spec in [RobustSpec::cvar(0.2)?, RobustSpec::chi2_pen(1.0)?] {
        let budget = 100_000;
        let sgm = SgmConfig::new(0.05, budget)
            .with_radius(p.radius())
            .with_averaging(Averaging::Suffix(2));
        let dual = DualSgmConfig {
            sgm: sgm.clone(),
            eta_step_size: 0.05,
            eta0: 0.0,
            eta_bounds: None,
        };
        let (x_dual, eta, _) = run_dual_sgm(&p, &spec, p.initial_point(), &dual, &RngStream::new(0))?;
        let obj = RobustObjective::new(&p, spec, EstimatorKind::Minibatch { n: 10 });
        let (x_mb, _) = run(&obj, p.initial_point(), &SgmConfig { iterations: budget / 10, ..sgm }, &RngStream::new(0))?;
        println!(
            "{spec:<22} dual SGM {:.4} (eta {eta:.3})  mini-batch {:.4}",
            full_batch(&p, &x_dual, &spec)?.value,
            full_batch(&p, &x_mb, &spec)?.value
        );
    }
    Ok(())
}
