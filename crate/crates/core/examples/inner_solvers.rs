//! Worst-case weights for one batch under each uncertainty set.

use dro::inner::{dual_value, solve};
use dro::weights::chi2_divergence_from;
use dro::{LossBatch, RobustSpec};

fn main() -> dro::Result<()> {
    let batch = LossBatch::new(vec![0.9, 0.2, 0.55, 0.1, 0.7, 0.05])?;
    println!("losses {:?}, mean {:.4}", batch.values(), batch.mean());
    let specs = [
        RobustSpec::cvar(1.0 / 3.0)?,
        RobustSpec::kl_cvar(1.0 / 3.0, 0.2)?,
        RobustSpec::chi2_pen(0.5)?,
        RobustSpec::chi2_con(0.5)?,
    ];
    for spec in specs {
        let sol = solve(&batch, &spec)?;
        let q: Vec<String> = sol.weights.as_slice().iter().map(|w| format!("{w:.3}")).collect();
        println!(
            "{spec:<32} value {:.4}  dual {:.4}  eta {:>8.4}  chi2 {:.3}  q [{}]",
            sol.value,
            dual_value(&batch, &spec, sol.eta),
            sol.eta,
            chi2_divergence_from(sol.weights.as_slice(), None),
            q.join(", ")
        );
    }

    // Atoms with probabilities behave like the replicated batch.
    let weighted = LossBatch::new(vec![1.0, 0.0])?.with_probs(vec![0.25, 0.75])?;
    let replicated = LossBatch::new(vec![1.0, 0.0, 0.0, 0.0])?;
    let spec = RobustSpec::chi2_con(0.125)?;
    println!(
        "weighted {:.6} vs replicated {:.6}",
        solve(&weighted, &spec)?.value,
        solve(&replicated, &spec)?.value
    );
    Ok(())
}
