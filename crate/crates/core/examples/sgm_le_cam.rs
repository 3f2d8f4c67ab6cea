//! Projected SGM on the two-point CVaR instances. Mini-batch gradients find
//! the minimizer of P₁ but the gap left on P₋₁ shows the bias.

use dro::estimators::EstimatorKind;
use dro::optim::{run, Averaging, RobustObjective, SgmConfig};
use dro::problems::cvar_lecam_pair;
use dro::{Problem, RngStream, RobustSpec};

fn main() -> dro::Result<()> {
    let alpha = 0.1;
    let (p1, p2) = cvar_lecam_pair(1.0, 1.0, alpha, 0.05)?;
    let spec = RobustSpec::cvar(alpha)?;
    for n in [1, 10, 100] {
        for (label, p) in [("P+1", &p1), ("P-1", &p2)] {
            let obj = RobustObjective::new(p, spec, EstimatorKind::Minibatch { n });
            let cfg = SgmConfig::new(0.01, 10_000)
                .with_radius(p.radius())
                .with_averaging(Averaging::Full);
            let (x, trace) = run(&obj, p.initial_point(), &cfg, &RngStream::new(1))?;
            let (_, best) = p.analytic_min();
            println!(
                "n={n:>3} {label}: x = {:+.3}, gap {:.4}, grad evals {}",
                x[0],
                p.analytic_objective(x[0]) - best,
                trace.total_grad_evals()
            );
        }
    }
    Ok(())
}
