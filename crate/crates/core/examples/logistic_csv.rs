//! Robust logistic regression from a CSV file.
//!
//! Usage: `cargo run --example logistic_csv -- [data.csv]`. Without an
//! argument a synthetic file is written to a temporary directory first.

use dro::estimators::EstimatorKind;
use dro::optim::{run, Momentum, RobustObjective, SgmConfig};
use dro::oracle::full_batch;
use dro::problems::{binary_logistic, load_dataset_csv, planted_dataset, write_dataset_csv};
use dro::{Problem, RngStream, RobustSpec};

fn main() -> dro::Result<()> {
    let path = match std::env::args().nth(1) {
        Some(p) => std::path::PathBuf::from(p),
        None => {
            let p = std::env::temp_dir().join("dro_logistic_example.csv");
            write_dataset_csv(&planted_dataset(500, 8, 3)?, &p)?;
            p
        }
    };
    let data = load_dataset_csv(&path)?;
    println!("{} rows, {} features from {}", data.len(), data.feat_dim(), path.display());
    let problem = binary_logistic(data, 1e-3, 10.0)?;

    for spec in [RobustSpec::cvar(1.0)?, RobustSpec::chi2_con(1.0)?, RobustSpec::cvar(0.2)?] {
        let obj = RobustObjective::new(&problem, spec, EstimatorKind::Minibatch { n: 32 });
        let cfg = SgmConfig::new(0.05, 5_000)
            .with_momentum(Momentum::Constant(0.9))
            .with_radius(problem.radius());
        let (x, _) = run(&obj, problem.initial_point(), &cfg, &RngStream::new(0))?;
        let data = problem.dataset();
        let group_loss = |g| {
            let idx = data.group_indices(g);
            idx.iter().map(|&i| problem.loss(&x, i)).sum::<f64>() / idx.len().max(1) as f64
        };
        println!(
            "{spec:<26} robust {:.4}  mean loss: common {:.4}, rare {:.4}",
            full_batch(&problem, &x, &spec)?.value,
            group_loss(0),
            group_loss(1)
        );
    }
    Ok(())
}
