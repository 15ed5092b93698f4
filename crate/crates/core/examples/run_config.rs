//! Runs any experiment config in memory and prints its metrics table, the
//! library-level equivalent of `homogenize-lab run` without file output.
//!
//! cargo run --release --example run_config -- configs/linear.json

use homogenize_lab::runner::{execute, ExperimentConfig};
use homogenize_lab::runner::output::metrics_csv;

fn main() {
    let path = std::env::args().nth(1).unwrap_or_else(|| "configs/field_check.json".into());
    let result = ExperimentConfig::from_file(path.as_ref()).and_then(|cfg| execute(&cfg, None));
    match result {
        Ok(out) => print!("{}", metrics_csv(&out.metrics)),
        Err(e) => {
            eprintln!("{e}");
            std::process::exit(e.exit_code());
        }
    }
}
