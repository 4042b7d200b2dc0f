//! Reuse of completed run directories keyed by configuration content.
//!
//! A cached directory is reused only when its manifest says complete, every
//! recorded hash still matches and its `config.json` equals the requested
//! configuration byte for byte. Anything else is deleted and recomputed.

use std::path::{Path, PathBuf};

use crate::config::ExperimentConfig;
use crate::manifest::{sha256_hex, Manifest, RunStatus};
use crate::pipeline::run_experiment;
use crate::sweep::{run_dir_name, sweep, SweepParam, SweepReport};
use crate::Result;

fn key(parts: &[&str]) -> String {
    sha256_hex(parts.join("\n").as_bytes())[..16].to_string()
}

fn config_matches(dir: &Path, cfg: &ExperimentConfig) -> bool {
    std::fs::read_to_string(dir.join("config.json")).is_ok_and(|t| t == cfg.to_json() + "\n")
}

fn intact(dir: &Path) -> bool {
    match Manifest::read(dir) {
        Ok(m) => m.status == RunStatus::Complete && m.mismatches(dir).is_ok_and(|b| b.is_empty()),
        Err(_) => false,
    }
}

fn clear(dir: &Path) -> Result<()> {
    if dir.exists() {
        std::fs::remove_dir_all(dir)?;
    }
    Ok(())
}

/// Run directory for `cfg` under `root`, computed unless a valid copy
/// exists. Returns the directory and whether it was reused.
pub fn cached_run(cfg: &ExperimentConfig, root: &Path) -> Result<(PathBuf, bool)> {
    let dir = root.join(format!("{}-{}", cfg.name, key(&[&cfg.to_json()])));
    if intact(&dir) && config_matches(&dir, cfg) {
        return Ok((dir, true));
    }
    clear(&dir)?;
    run_experiment(cfg, &dir)?;
    Ok((dir, false))
}

/// Sweep directory for `cfg` over `values`, computed unless a valid copy
/// exists.
pub fn cached_sweep(
    cfg: &ExperimentConfig,
    param: SweepParam,
    values: &[String],
    root: &Path,
    jobs: usize,
) -> Result<(PathBuf, SweepReport, bool)> {
    let mut parts = vec![cfg.to_json(), param.name().to_string()];
    parts.extend(values.iter().cloned());
    let refs: Vec<&str> = parts.iter().map(String::as_str).collect();
    let dir = root.join(format!(
        "{}-sweep-{}-{}",
        cfg.name,
        param.name(),
        key(&refs)
    ));
    let valid = intact(&dir)
        && values.iter().all(|v| {
            param
                .apply(cfg, v)
                .is_ok_and(|(c, canon)| config_matches(&dir.join(run_dir_name(param, &canon)), &c))
        });
    if valid {
        if let Ok(text) = std::fs::read_to_string(dir.join("sweep.json")) {
            if let Ok(report) = serde_json::from_str(&text) {
                return Ok((dir, report, true));
            }
        }
    }
    clear(&dir)?;
    let report = sweep(cfg, param, values, &dir, jobs)?;
    Ok((dir, report, false))
}
