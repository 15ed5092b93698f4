//! The distribution-comparison toolkit on synthetic data: KS and W1 with
//! bootstrap intervals, correlation, and the convergence-ladder rule.
//!
//! cargo run --release --example stats_toolkit

use homogenize_lab::rng::{Level, StreamFactory};
use homogenize_lab::stats::{correlation_ci, ks_with_ci, w1_with_ci, ConvergenceLadder, SampleSet};
use homogenize_lab::Result;
use rand::Rng;
use rand_distr::StandardNormal;

fn main() -> Result<()> {
    let streams = StreamFactory::new(5, 0);
    let mut rng = streams.stream(Level::Custom(1), 0);
    let target: Vec<f64> = (0..4000).map(|_| rng.sample(StandardNormal)).collect();
    let target = SampleSet::new(target, "target", 5)?;

    // a ladder of approximations whose bias shrinks like eps
    let epsilons = vec![0.4, 0.2, 0.1, 0.05];
    let mut ks = Vec::new();
    for (i, eps) in epsilons.iter().enumerate() {
        let approx: Vec<f64> = (0..4000).map(|_| eps + (1.0 + eps) * rng.sample::<f64, _>(StandardNormal)).collect();
        let approx = SampleSet::new(approx, format!("eps={eps}"), 5)?;
        let mut boot = streams.stream(Level::Bootstrap, i as u64);
        let k = ks_with_ci(&approx, &target, 500, &mut boot)?;
        let w = w1_with_ci(&approx, &target, 500, &mut boot)?;
        println!("eps {eps:<5} KS {:.4} [{:.4}, {:.4}]  W1 {:.4} [{:.4}, {:.4}]", k.value, k.ci_lo, k.ci_hi, w.value, w.ci_lo, w.ci_hi);
        ks.push(k);
    }
    let ladder = ConvergenceLadder::new(epsilons, ks)?;
    println!("monotone trend (one CI-overlap violation allowed): {}", ladder.monotone_trend());

    let x: Vec<f64> = (0..1000).map(|_| rng.sample(StandardNormal)).collect();
    let y: Vec<f64> = x.iter().map(|v| 0.5 * v + rng.sample::<f64, _>(StandardNormal)).collect();
    let r = correlation_ci(&SampleSet::new(x, "x", 5)?, &SampleSet::new(y, "y", 5)?, &mut rng)?;
    println!("correlation {:.3} [{:.3}, {:.3}] (true {:.3})", r.value, r.ci_lo, r.ci_hi, 0.5 / 1.25f64.sqrt());
    Ok(())
}
