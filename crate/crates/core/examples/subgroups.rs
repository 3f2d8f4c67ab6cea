//! Multi-class logistic regression on data with a rare shifted subgroup:
//! average-loss training versus χ²-constrained training.

use dro::estimators::EstimatorKind;
use dro::optim::{run, Momentum, RobustObjective, SgmConfig};
use dro::problems::{multiclass_logistic, synthetic_subgroup_dataset};
use dro::{Problem, RngStream, RobustSpec};

fn main() -> dro::Result<()> {
    let data = synthetic_subgroup_dataset(2_000, 10, 4, 0.05, 1)?;
    let p = multiclass_logistic(data, 1e-3, 20.0)?;
    for spec in [RobustSpec::cvar(1.0)?, RobustSpec::chi2_con(1.0)?, RobustSpec::chi2_con(4.0)?] {
        let obj = RobustObjective::new(&p, spec, EstimatorKind::Minibatch { n: 50 });
        let cfg = SgmConfig::new(0.1, 4_000)
            .with_momentum(Momentum::Constant(0.9))
            .with_radius(p.radius());
        let (x, _) = run(&obj, p.initial_point(), &cfg, &RngStream::new(2))?;
        let data = p.dataset();
        let stats = |g: i64| {
            let idx = data.group_indices(g);
            let loss = idx.iter().map(|&i| p.loss(&x, i)).sum::<f64>() / idx.len() as f64;
            (loss, idx.len())
        };
        let ((common, n0), (rare, n1)) = (stats(0), stats(1));
        println!("{spec:<22} loss common ({n0}) {common:.3}  rare ({n1}) {rare:.3}");
    }
    Ok(())
}
