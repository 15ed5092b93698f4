//! Asymptotic independence of the scalar at two distinct points: the sample
//! correlation of `u_eps(t, x)` and `u_eps(t, x2)` decays as eps shrinks.
//!
//! cargo run --release --example two_point

use homogenize_lab::runner::{execute, ExperimentConfig};
use homogenize_lab::Result;

const CONFIG: &str = r#"{
  "experiment": "two-point",
  "measure": {"preset": "isotropic-shell", "num_modes": 8, "K0": 1.0, "energy": 1.0, "alpha": 1.0, "seed": 7},
  "u0": {"center": [0.0, 0.0], "radius": 2.0},
  "T": 1.0,
  "x": [0.5, 0.0],
  "x2": [-0.5, 0.0],
  "epsilons": [0.4, 0.2, 0.1],
  "n_paths": 1000,
  "seed": 2,
  "numerics": {"gk_paths": 500, "bootstrap": 300}
}"#;

fn main() -> Result<()> {
    let out = execute(&ExperimentConfig::from_json(CONFIG)?, None)?;
    for row in out.metrics.iter().filter(|r| r.metric.contains("corr")) {
        println!("{:<8} {:<18} {:>8.4} [{:.4}, {:.4}]", row.epsilon, row.metric, row.value, row.ci_lo, row.ci_hi);
    }
    Ok(())
}
