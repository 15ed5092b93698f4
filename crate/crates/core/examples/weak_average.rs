//! Spatial averages against a test function converge to a deterministic
//! limit even though pointwise values stay random: the variance of the
//! weak average falls with eps while its mean settles on the Gaussian
//! quadrature of the limit.
//!
//! cargo run --release --example weak_average

use homogenize_lab::runner::{execute, ExperimentConfig};
use homogenize_lab::Result;

const CONFIG: &str = r#"{
  "experiment": "weak-average",
  "measure": {"preset": "isotropic-shell", "num_modes": 8, "K0": 1.0, "energy": 1.0, "alpha": 1.0, "seed": 7},
  "u0": {"center": [0.0, 0.0], "radius": 2.0},
  "T": 1.0,
  "x": [0.0, 0.0],
  "epsilons": [0.4, 0.2, 0.1],
  "n_paths": 200,
  "seed": 3,
  "numerics": {"gk_paths": 500, "bootstrap": 300}
}"#;

fn main() -> Result<()> {
    let out = execute(&ExperimentConfig::from_json(CONFIG)?, None)?;
    for row in &out.metrics {
        if row.metric.starts_with("weak") {
            println!("{:<8} {:<16} {:>8.4} [{:.4}, {:.4}]", row.epsilon, row.metric, row.value, row.ci_lo, row.ci_hi);
        }
    }
    Ok(())
}
