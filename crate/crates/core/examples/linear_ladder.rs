//! Law of the passive scalar `u_eps(t, x) = u0(X_eps(T))` against the
//! Brownian limit `u0(x + beta_{T-t})`, along a ladder of eps values.
//!
//! cargo run --release --example linear_ladder

use homogenize_lab::runner::{execute, ExperimentConfig};
use homogenize_lab::Result;

const CONFIG: &str = r#"{
  "experiment": "linear",
  "measure": {"preset": "isotropic-shell", "num_modes": 8, "K0": 1.0, "energy": 1.0, "alpha": 1.0, "seed": 7},
  "u0": {"center": [0.0, 0.0], "radius": 2.0},
  "T": 1.0,
  "x": [0.5, 0.0],
  "epsilons": [0.4, 0.2, 0.1],
  "n_paths": 1000,
  "seed": 1,
  "numerics": {"gk_paths": 500, "bootstrap": 300}
}"#;

fn main() -> Result<()> {
    let cfg = ExperimentConfig::from_json(CONFIG)?;
    let out = execute(&cfg, None)?;
    println!("{:<8} {:>8} {:>8} {:>8}", "eps", "KS", "W1", "mean");
    for eps in ["0.4", "0.2", "0.1", "limit"] {
        let get = |m: &str| out.metric(eps, m).map_or(f64::NAN, |r| r.value);
        println!("{eps:<8} {:>8.4} {:>8.4} {:>8.4}", get("ks"), get("w1"), get("mean"));
    }
    let a = &out.coefficients.as_ref().expect("coefficients").a;
    println!("effective diffusivity A =\n{a:.4}");
    Ok(())
}
