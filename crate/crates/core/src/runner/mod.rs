//! Config-driven experiment runner behind the `homogenize-lab` binary.

pub mod config;
pub mod output;
pub mod pipelines;

use std::path::PathBuf;

pub use config::{ExperimentConfig, ExperimentKind, Resolved};
pub use pipelines::{eps_label, MetricRow, PipelineOutput};

use crate::error::{LabError, Result};

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out_dir: Option<PathBuf>,
    /// Worker threads; all cores when `None`.
    pub threads: Option<usize>,
    /// Overrides the config's master seed.
    pub seed: Option<u64>,
}

#[derive(Debug)]
pub struct RunReport {
    pub out_dir: PathBuf,
    pub files: Vec<PathBuf>,
    pub output: PipelineOutput,
}

fn effective(cfg: &ExperimentConfig, opts: &RunOptions) -> ExperimentConfig {
    let mut cfg = cfg.clone();
    if let Some(s) = opts.seed {
        cfg.seed = s;
    }
    cfg
}

/// Validates and runs in memory on a dedicated pool of `threads` workers.
pub fn execute(cfg: &ExperimentConfig, threads: Option<usize>) -> Result<PipelineOutput> {
    let resolved = cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()
        .map_err(|e| LabError::validation("threads", e.to_string()))?;
    pool.install(|| pipelines::execute(cfg, &resolved))
}

/// Runs the experiment and writes all outputs.
pub fn run(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunReport> {
    let cfg = effective(cfg, opts);
    if opts.threads == Some(0) {
        return Err(LabError::validation("threads", "must be at least 1"));
    }
    let output = execute(&cfg, opts.threads)?;
    let out_dir = opts
        .out_dir
        .clone()
        .or_else(|| cfg.output_dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out").join(cfg.experiment.name()));
    let threads = opts.threads.unwrap_or_else(rayon::current_num_threads);
    let files = output::write_outputs(&out_dir, &cfg, &output, threads)?;
    Ok(RunReport { out_dir, files, output })
}

/// Estimates the homogenized coefficients for the config's measure and `f`.
pub fn coefficients(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunReport> {
    let mut c = effective(cfg, opts);
    c.experiment = ExperimentKind::Coefficients;
    c.weak = None;
    run(&c, &RunOptions { seed: None, ..opts.clone() })
}
