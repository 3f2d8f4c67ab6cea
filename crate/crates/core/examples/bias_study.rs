//! How the mini-batch objective underestimates the population one.
//!
//! CVaR on Bernoulli losses has an exact binomial formula; the χ²-penalty
//! curve comes from Monte Carlo.

use dro::oracle::{bernoulli_cvar_surrogate, full_batch, mc_bias_estimate};
use dro::problems::bernoulli_linear;
use dro::stats::loglog_slope;
use dro::{RngStream, RobustSpec};

fn main() -> dro::Result<()> {
    let alpha = 0.1;
    println!("CVaR alpha={alpha}, exact");
    let ns = [10u64, 100, 1_000, 10_000];
    let biases: Vec<f64> = ns
        .iter()
        .map(|&n| bernoulli_cvar_surrogate(alpha, n, 1.0).map(|v| 1.0 - v))
        .collect::<dro::Result<_>>()?;
    for (n, b) in ns.iter().zip(&biases) {
        println!("  n={n:>6}  bias {b:.5}  sqrt(alpha n)*bias {:.3}", b * (alpha * *n as f64).sqrt());
    }
    let xs: Vec<f64> = ns.iter().map(|&n| n as f64).collect();
    println!("  slope {:.3}", loglog_slope(&xs, &biases));

    let lambda = 0.25;
    let spec = RobustSpec::chi2_pen(lambda)?;
    let p = bernoulli_linear(lambda, 1.0, 1.0)?;
    let exact = full_batch(&p, &[1.0], &spec)?.value;
    println!("chi2 penalty lambda={lambda}, Monte Carlo (L = {exact:.4})");
    let stream = RngStream::new(0);
    let ns = [10usize, 40, 160, 640];
    let mut biases = Vec::new();
    for &n in &ns {
        let m = mc_bias_estimate(&p, &[1.0], &spec, n, 50_000, &stream.derive(n as u64))?;
        println!("  n={n:>4}  bias {:.5} ± {:.5}", exact - m.mean, m.stderr);
        biases.push(exact - m.mean);
    }
    let xs: Vec<f64> = ns.iter().map(|&n| n as f64).collect();
    println!("  slope {:.3}", loglog_slope(&xs, &biases));
    Ok(())
}
