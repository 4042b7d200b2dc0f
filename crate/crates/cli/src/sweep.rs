//! One run per value of a single parameter, plus a comparison table.
//!
//! ```text
//! <root>/<param>=<value>/...   a run directory each
//! <root>/comparison.csv
//! <root>/sweep.json
//! <root>/MANIFEST
//! ```

use std::collections::HashSet;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use biaslab::analysis::{self, output};
use biaslab::models::{load_checkpoint, ModelFamily};
use biaslab::tasks::load_dataset;
use biaslab::training::{record_at, MetricsRecord, Split};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::pipeline::{
    checkpoint_path, delta_l_at, fresh_dir, read_run_metrics, run_experiment, with_manifest,
    RunSummary,
};
use crate::{CliError, Result};

/// Sequences of `d_rsn_test` used for the attention-average column.
pub const ATTENTION_SEQUENCES: usize = 1000;
/// Reasoning-train accuracy that fixes the comparison epoch.
pub const COMPARISON_ACCURACY: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Gamma,
    Lr,
    UseLayerNorm,
}

impl FromStr for SweepParam {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gamma" => Ok(Self::Gamma),
            "lr" => Ok(Self::Lr),
            "use_layer_norm" => Ok(Self::UseLayerNorm),
            _ => Err(CliError::Config(format!(
                "sweep parameter: {s:?} is not one of gamma, lr, use_layer_norm"
            ))),
        }
    }
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            Self::Gamma => "gamma",
            Self::Lr => "lr",
            Self::UseLayerNorm => "use_layer_norm",
        }
    }

    /// Sets the parameter on a copy of `cfg`. Returns the canonical text of
    /// the value, used for directory names and duplicate detection.
    pub fn apply(self, cfg: &ExperimentConfig, raw: &str) -> Result<(ExperimentConfig, String)> {
        let mut out = cfg.clone();
        let bad =
            |e: String| CliError::Config(format!("sweep value for {}: {raw:?}: {e}", self.name()));
        let canon = match self {
            Self::Gamma => {
                let v: f64 = raw
                    .trim()
                    .parse()
                    .map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?;
                out.model.gamma = v;
                v.to_string()
            }
            Self::Lr => {
                let v: f64 = raw
                    .trim()
                    .parse()
                    .map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?;
                out.train.lr = v;
                v.to_string()
            }
            Self::UseLayerNorm => {
                let v: bool = raw
                    .trim()
                    .parse()
                    .map_err(|e: std::str::ParseBoolError| bad(e.to_string()))?;
                out.model.use_layer_norm = v;
                v.to_string()
            }
        };
        out.validate()?;
        Ok((out, canon))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepRun {
    pub value: String,
    pub dir: PathBuf,
    pub summary: RunSummary,
    /// Median relative attention-average error on `d_rsn_test` at the
    /// final checkpoint; `None` for models without attention.
    pub attention_median_error: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepReport {
    pub param: SweepParam,
    pub comparison_epoch: usize,
    pub runs: Vec<SweepRun>,
}

/// Earliest epoch at which any run reaches the threshold on `d_rsn_train`,
/// else the last epoch.
pub fn comparison_epoch(runs: &[Vec<MetricsRecord>], last: usize) -> usize {
    runs.iter()
        .filter_map(|r| {
            r.iter()
                .filter(|m| m.split == Split::RsnTrain && m.accuracy >= COMPARISON_ACCURACY)
                .map(|m| m.epoch)
                .min()
        })
        .min()
        .unwrap_or(last)
}

fn final_attention_error(cfg: &ExperimentConfig, dir: &Path) -> Result<Option<f64>> {
    if cfg.model.family != ModelFamily::DecoderTransformer {
        return Ok(None);
    }
    let data = load_dataset(&dir.join("dataset.csv"), &cfg.task)?;
    let ckpt = load_checkpoint(&checkpoint_path(dir, cfg.train.epochs))?;
    let n = data.d_rsn_test.len().min(ATTENTION_SEQUENCES);
    if n == 0 {
        return Ok(None);
    }
    Ok(Some(
        analysis::attention_average_error(&ckpt, &data.d_rsn_test[..n])?.median_relative_error,
    ))
}

pub fn run_dir_name(param: SweepParam, value: &str) -> String {
    format!("{}={value}", param.name())
}

/// Runs every value into its own directory under `root` (new or empty),
/// at most `jobs` at a time.
pub fn sweep(
    cfg: &ExperimentConfig,
    param: SweepParam,
    values: &[String],
    root: &Path,
    jobs: usize,
) -> Result<SweepReport> {
    if values.is_empty() {
        return Err(CliError::Config("sweep values: empty list".into()));
    }
    let mut seen = HashSet::new();
    let mut plan = Vec::with_capacity(values.len());
    for raw in values {
        let (c, canon) = param.apply(cfg, raw)?;
        if !seen.insert(canon.clone()) {
            return Err(CliError::Config(format!(
                "sweep values: {canon} appears twice"
            )));
        }
        plan.push((c, canon));
    }
    fresh_dir(root)?;
    with_manifest(root, || {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build()
            .map_err(|e| CliError::Stage(e.to_string()))?;
        let runs: Vec<Result<SweepRun>> = pool.install(|| {
            plan.par_iter()
                .map(|(c, canon)| {
                    let dir = root.join(run_dir_name(param, canon));
                    let summary = run_experiment(c, &dir)?;
                    Ok(SweepRun {
                        value: canon.clone(),
                        attention_median_error: final_attention_error(c, &dir)?,
                        dir,
                        summary,
                    })
                })
                .collect()
        });
        let runs = runs.into_iter().collect::<Result<Vec<_>>>()?;
        let metrics = runs
            .iter()
            .map(|r| read_run_metrics(&r.dir))
            .collect::<Result<Vec<_>>>()?;
        let epoch = comparison_epoch(&metrics, cfg.train.epochs);
        write_comparison(
            &root.join("comparison.csv"),
            &runs,
            &metrics,
            epoch,
            cfg.train.epochs,
        )?;
        let report = SweepReport {
            param,
            comparison_epoch: epoch,
            runs,
        };
        output::write_json(&root.join("sweep.json"), &report)?;
        Ok(report)
    })
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

/// `value,comparison_epoch,delta_l_comparison,delta_l_final`, then loss and
/// accuracy per split at the comparison epoch, accuracy per split at the
/// last epoch and the attention-average error.
pub fn write_comparison(
    path: &Path,
    runs: &[SweepRun],
    metrics: &[Vec<MetricsRecord>],
    epoch: usize,
    last: usize,
) -> Result<()> {
    let mut w = output::create(path)?;
    let splits = [Split::Mem, Split::RsnTrain, Split::RsnTest];
    let mut header = vec![
        "value",
        "comparison_epoch",
        "delta_l_comparison",
        "delta_l_final",
    ]
    .into_iter()
    .map(String::from)
    .collect::<Vec<_>>();
    for s in splits {
        header.push(format!("{}_loss", s.name()));
        header.push(format!("{}_accuracy", s.name()));
    }
    for s in splits {
        header.push(format!("final_{}_accuracy", s.name()));
    }
    header.push("attention_median_error".into());
    writeln!(w, "{}", header.join(","))?;
    for (run, recs) in runs.iter().zip(metrics) {
        let mut row = vec![
            run.value.clone(),
            epoch.to_string(),
            opt(delta_l_at(recs, epoch)),
            opt(delta_l_at(recs, last)),
        ];
        for s in splits {
            let r = record_at(recs, s, epoch);
            row.push(opt(r.map(|r| r.loss)));
            row.push(opt(r.map(|r| r.accuracy)));
        }
        for s in splits {
            row.push(opt(record_at(recs, s, last).map(|r| r.accuracy)));
        }
        row.push(opt(run.attention_median_error));
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads `comparison.csv` back as header-keyed rows.
pub fn read_comparison(path: &Path) -> Result<Vec<Vec<(String, String)>>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or_default().split(',').collect();
    Ok(lines
        .map(|l| {
            header
                .iter()
                .map(|h| h.to_string())
                .zip(l.split(',').map(str::to_string))
                .collect()
        })
        .collect())
}
