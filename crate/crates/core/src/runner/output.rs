//! Result files: metrics, samples, coefficients, correlators and the manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde_json::json;
use sha2::{Digest, Sha256};

use super::config::ExperimentConfig;
use super::pipelines::{MetricRow, PipelineOutput};
use crate::error::Result;

pub const METRICS_HEADER: &str = "epsilon,metric,value,ci_lo,ci_hi,n";

/// `metrics.csv` body. Values use the shortest round-trip representation.
pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!("{},{},{},{},{},{}\n", r.epsilon, r.metric, r.value, r.ci_lo, r.ci_hi, r.n));
    }
    s
}

pub fn samples_csv(values: &[f64]) -> String {
    let mut s = String::from("path_id,U_t\n");
    for (i, v) in values.iter().enumerate() {
        s.push_str(&format!("{i},{v}\n"));
    }
    s
}

/// Hex SHA-256 of the canonical (compact) config JSON.
pub fn config_hash(cfg: &ExperimentConfig) -> Result<String> {
    let canonical = serde_json::to_string(cfg)?;
    Ok(hex::encode(Sha256::digest(canonical.as_bytes())))
}

fn manifest(cfg: &ExperimentConfig, out: &PipelineOutput, threads: usize, files: &[String]) -> Result<String> {
    let total: f64 = out.timings.iter().map(|(_, t)| t).sum();
    let timings: serde_json::Map<String, serde_json::Value> =
        out.timings.iter().map(|(k, v)| (k.clone(), json!(v))).collect();
    let m = json!({
        "tool": "homogenize-lab",
        "version": env!("CARGO_PKG_VERSION"),
        "experiment": cfg.experiment.name(),
        "experiment_id": cfg.experiment_id,
        "master_seed": cfg.seed,
        "stream_keying": "ChaCha8 keyed by (master_seed, experiment_id, level); stream index = trajectory index",
        "config_sha256": config_hash(cfg)?,
        "config": serde_json::to_value(cfg)?,
        "coefficients_file": cfg.coefficients_file,
        "threads": threads,
        "outputs": files,
        "wall_time_s": timings,
        "total_wall_time_s": total,
    });
    Ok(serde_json::to_string_pretty(&m)?)
}

/// Writes every output into `dir`. On failure the files written so far are
/// removed, and `dir` too when this call created it.
pub fn write_outputs(
    dir: &Path,
    cfg: &ExperimentConfig,
    out: &PipelineOutput,
    threads: usize,
) -> Result<Vec<PathBuf>> {
    let created = !dir.exists();
    let mut written = Vec::new();
    let res = write_all(dir, cfg, out, threads, &mut written);
    if res.is_err() {
        for p in &written {
            let _ = fs::remove_file(p);
        }
        if created {
            let _ = fs::remove_dir_all(dir);
        }
    }
    res.map(|_| written)
}

fn write_all(
    dir: &Path,
    cfg: &ExperimentConfig,
    out: &PipelineOutput,
    threads: usize,
    written: &mut Vec<PathBuf>,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut files: Vec<(String, String)> = vec![("metrics.csv".into(), metrics_csv(&out.metrics))];
    for (label, values) in &out.samples {
        files.push((format!("samples_{label}.csv"), samples_csv(values)));
    }
    if let Some(c) = &out.coefficients {
        files.push(("coefficients.json".into(), c.to_json()?));
    }
    if let Some(t) = &out.correlators {
        files.push(("correlators.csv".into(), t.to_csv()));
    }
    let names: Vec<String> = files.iter().map(|(n, _)| n.clone()).collect();
    files.push(("manifest.json".into(), manifest(cfg, out, threads, &names)?));
    for (name, body) in files {
        let p = dir.join(name);
        written.push(p.clone());
        fs::write(&p, body)?;
    }
    Ok(())
}
