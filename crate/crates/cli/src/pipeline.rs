//! generate -> train -> analyze, each stage writing into one run directory.
//!
//! ```text
//! <run>/config.json
//! <run>/dataset.csv, memory_table.csv
//! <run>/metrics.csv                       epoch,split,loss,accuracy
//! <run>/checkpoints/epoch_0040.ckpt
//! <run>/analysis/00_similarity.csv|json
//! <run>/summary.json
//! <run>/MANIFEST
//! ```

use std::collections::HashMap;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::time::Instant;

use biaslab::analysis::{self, output};
use biaslab::linalg::cosine;
use biaslab::models::{load_checkpoint, save_checkpoint, ModelCheckpoint};
use biaslab::tasks::{
    generate_dataset, load_dataset, save_dataset, save_memory_table, DatasetSplit, Sample, Token,
};
use biaslab::theory::{EmbeddingConstants, EmbeddingForm, Role};
use biaslab::training::{
    delta_l, first_crossing, read_metrics_csv, record_at, train, version_string, CsvSink, FnSink,
    MemorySink, MetricsRecord, Split, Tee,
};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{AnalysisRequest, ExperimentConfig, TheoryFormChoice, TokenSet};
use crate::manifest::{Manifest, RunStatus};
use crate::{CliError, Result};

pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const ANALYSIS_DIR: &str = "analysis";

pub fn checkpoint_path(run: &Path, epoch: usize) -> PathBuf {
    run.join(CHECKPOINT_DIR)
        .join(format!("epoch_{epoch:04}.ckpt"))
}

pub fn split_samples(data: &DatasetSplit, split: Split) -> &[Sample] {
    match split {
        Split::Mem => &data.d_mem,
        Split::RsnTrain => &data.d_rsn_train,
        Split::RsnTest => &data.d_rsn_test,
    }
}

/// Creates `dir`, refusing one that already holds files.
pub fn fresh_dir(dir: &Path) -> Result<()> {
    if dir.exists() && std::fs::read_dir(dir)?.next().is_some() {
        return Err(CliError::Overlap(dir.to_path_buf()));
    }
    std::fs::create_dir_all(dir)?;
    Ok(())
}

/// Runs `body`, then writes a manifest marked complete or incomplete.
pub fn with_manifest<T>(dir: &Path, body: impl FnOnce() -> Result<T>) -> Result<T> {
    let out = body();
    let (status, err) = match &out {
        Ok(_) => (RunStatus::Complete, None),
        Err(e) => (RunStatus::Incomplete, Some(e.to_string())),
    };
    Manifest::scan(dir, status, err)?.write(dir)?;
    out
}

pub fn write_config(cfg: &ExperimentConfig, run: &Path) -> Result<()> {
    std::fs::write(run.join("config.json"), cfg.to_json() + "\n")?;
    Ok(())
}

pub fn gen_data_stage(cfg: &ExperimentConfig, run: &Path) -> Result<DatasetSplit> {
    let (data, table) = generate_dataset(&cfg.task, cfg.n_samples)?;
    save_dataset(&run.join("dataset.csv"), &data, &cfg.task)?;
    save_memory_table(&run.join("memory_table.csv"), &table)?;
    Ok(data)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs_run: usize,
    pub records: Vec<MetricsRecord>,
    pub checkpoints: Vec<usize>,
}

pub fn train_stage(
    cfg: &ExperimentConfig,
    run: &Path,
    data: &DatasetSplit,
) -> Result<TrainSummary> {
    std::fs::create_dir_all(run.join(CHECKPOINT_DIR))?;
    let wanted = cfg.checkpoint_epochs();
    let mut saved = Vec::new();
    let saver = FnSink(|_: &[MetricsRecord], m: &ModelCheckpoint| {
        if wanted.contains(&m.epoch) {
            save_checkpoint(&checkpoint_path(run, m.epoch), m)?;
            saved.push(m.epoch);
        }
        Ok(ControlFlow::Continue(()))
    });
    let mut sink = Tee(
        Tee(
            CsvSink::create(&run.join("metrics.csv"))?,
            MemorySink::default(),
        ),
        saver,
    );
    let model = ModelCheckpoint::init(&cfg.model)?;
    let outcome = train(model, data, &cfg.train, &mut sink)?;
    let Tee(Tee(_, mem), _) = sink;
    Ok(TrainSummary {
        epochs_run: outcome.epochs_run,
        records: mem.records,
        checkpoints: saved,
    })
}

fn role_of(cfg: &ExperimentConfig, tokens: &[Token]) -> Result<Role> {
    let t = cfg.task.clone();
    let first = *tokens
        .first()
        .ok_or_else(|| CliError::Stage("empty token set".into()))?;
    if t.rsn_anchor_range.contains(first) {
        Ok(Role::RsnAnchor)
    } else if t.key_range.contains(first) {
        Ok(Role::Key)
    } else {
        Err(CliError::Stage(format!(
            "token {first} has no theoretical embedding"
        )))
    }
}

fn file_stem(i: usize, req: &AnalysisRequest) -> String {
    format!("{i:02}_{}", req.kind())
}

/// One analysis request against one checkpoint; writes its CSV files and
/// returns the JSON summary (also written).
pub fn run_analysis(
    cfg: &ExperimentConfig,
    req: &AnalysisRequest,
    ckpt: &ModelCheckpoint,
    data: &DatasetSplit,
    out_dir: &Path,
    stem: &str,
) -> Result<Value> {
    let csv = |suffix: &str| output::create(&out_dir.join(format!("{stem}{suffix}.csv")));
    let epoch = ckpt.epoch;
    let summary = match req {
        AnalysisRequest::Similarity { tokens, .. } => {
            let m = analysis::cosine_similarity_matrix(ckpt, &tokens.tokens(&cfg.task))?;
            output::write_similarity_csv(csv("")?, &m)?;
            json!({
                "tokens": tokens.label(),
                "mean_off_diagonal": m.mean_off_diagonal(),
                "distance_spearman": m.distance_spearman(),
                "zero_norm": m.zero_norm,
            })
        }
        AnalysisRequest::Pca { tokens, k, .. } => {
            let p = analysis::pca_project(ckpt, &tokens.tokens(&cfg.task), *k)?;
            output::write_pca_csv(csv("")?, &p)?;
            let best = p.best_value_correlation();
            json!({
                "tokens": tokens.label(),
                "variance_ratio": p.variance_ratio,
                "best_component": best.map(|b| b.0 + 1),
                "best_value_spearman": best.map(|b| b.1),
            })
        }
        AnalysisRequest::Svd { matrix, k, .. } => {
            let r = analysis::svd_report(ckpt, matrix, *k)?;
            output::write_spectrum_csv(csv("")?, &r.singular_values)?;
            let align = |tokens: &TokenSet| -> Result<Option<f64>> {
                let mean = analysis::mean_embedding(ckpt, &tokens.tokens(&cfg.task))?;
                Ok(r.left
                    .first()
                    .filter(|u| u.len() == mean.len())
                    .and_then(|u| cosine(u, &mean)))
            };
            use crate::config::NamedSet;
            json!({
                "matrix": matrix,
                "top_ratio": r.top_ratio(),
                "singular_values": r.singular_values,
                "top_left_cos_mean_rsn": align(&TokenSet::Named(NamedSet::Rsn))?,
                "top_left_cos_mean_mem": align(&TokenSet::Named(NamedSet::Mem))?,
                "left": r.left,
                "right": r.right,
            })
        }
        AnalysisRequest::AttentionError {
            split,
            max_sequences,
            ..
        } => {
            let s = split_samples(data, *split);
            let s = &s[..s.len().min(*max_sequences)];
            let a = analysis::attention_average_error(ckpt, s)?;
            output::write_dense_csv(csv("")?, &a.mean_attention)?;
            json!({
                "split": split,
                "n_sequences": s.len(),
                "n_entries": a.n_entries,
                "median_relative_error": a.median_relative_error,
                "p90_relative_error": a.p90_relative_error,
                "max_relative_error": a.max_relative_error,
                "frac_abs_error_above_005": a.frac_abs_error_above_005,
            })
        }
        AnalysisRequest::LastRow {
            split, n_sequences, ..
        } => {
            let s = split_samples(data, *split);
            let mut rows = Vec::new();
            let mut profiles = Vec::new();
            for sample in s.iter().take(*n_sequences) {
                let p = analysis::last_row_attention_profile(ckpt, sample, cfg.task.q)?;
                rows.push(p.heads[0].scores.clone());
                profiles.push(p);
            }
            output::write_dense_csv(csv("")?, &rows)?;
            if let Some(p) = profiles.first() {
                output::write_similarity_csv(csv("_positions")?, &p.position_cosines)?;
            }
            let cliffs = profiles
                .iter()
                .filter(|p| p.heads[0].verdict.is_cliff)
                .count();
            json!({
                "split": split,
                "n_sequences": profiles.len(),
                "cliff_count": cliffs,
                "profiles": profiles.iter().map(|p| json!({
                    "p": p.p,
                    "heads": p.heads,
                })).collect::<Vec<_>>(),
            })
        }
        AnalysisRequest::CompareTheory { tokens, form, .. } => {
            let toks = tokens.tokens(&cfg.task);
            let role = role_of(cfg, &toks)?;
            let form = match form {
                TheoryFormChoice::Fitted => EmbeddingForm::Fitted { d_m: cfg.model.d_m },
                TheoryFormChoice::Derived => EmbeddingForm::Derived(EmbeddingConstants::from_task(
                    &cfg.task,
                    toks[0],
                    role,
                    cfg.train.lr,
                    cfg.model.d_m,
                )?),
            };
            let c = analysis::compare_embedding_theory(ckpt, &cfg.task, &toks, role, &form)?;
            let mut w = csv("")?;
            use std::io::Write;
            writeln!(w, "s_i,s_j,distance,empirical,theory,abs_diff,near")?;
            let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
            for p in &c.pairs {
                writeln!(
                    w,
                    "{},{},{},{},{},{},{}",
                    p.s_i,
                    p.s_j,
                    p.distance,
                    opt(p.empirical),
                    opt(p.theory),
                    opt(p.abs_diff),
                    p.near
                )?;
            }
            w.flush()?;
            json!({
                "tokens": tokens.label(),
                "role": role,
                "mean_abs_diff_within_3": c.mean_abs_diff_within(3),
                "mean_abs_diff_within_5": c.mean_abs_diff_within(5),
                "empirical_distance_spearman": c.empirical_distance_spearman(),
                "theory_distance_spearman": c.theory_distance_spearman(),
                "cross_spearman": c.cross_spearman(),
            })
        }
    };
    let mut summary = summary;
    summary["kind"] = json!(req.kind());
    summary["epoch"] = json!(epoch);
    output::write_json(&out_dir.join(format!("{stem}.json")), &summary)?;
    Ok(summary)
}

pub fn analysis_stage(
    cfg: &ExperimentConfig,
    run: &Path,
    data: &DatasetSplit,
) -> Result<Vec<Value>> {
    let out = run.join(ANALYSIS_DIR);
    std::fs::create_dir_all(&out)?;
    let mut cache: HashMap<usize, ModelCheckpoint> = HashMap::new();
    let mut all = Vec::with_capacity(cfg.analyses.len());
    for (i, req) in cfg.analyses.iter().enumerate() {
        let epoch = req.at().resolve(cfg.train.epochs);
        if !cache.contains_key(&epoch) {
            let path = checkpoint_path(run, epoch);
            let ckpt = load_checkpoint(&path)
                .map_err(|e| CliError::Stage(format!("{}: {e}", path.display())))?;
            cache.insert(epoch, ckpt);
        }
        all.push(run_analysis(
            cfg,
            req,
            &cache[&epoch],
            data,
            &out,
            &file_stem(i, req),
        )?);
    }
    Ok(all)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub version: String,
    pub epochs_run: usize,
    pub final_metrics: Vec<MetricsRecord>,
    /// `(L_mem - L_rsn_train) / L_rsn_train` at the last evaluation.
    pub delta_l_final: Option<f64>,
    pub first_rsn_test_crossing_09: Option<usize>,
    pub first_rsn_train_crossing_09: Option<usize>,
    pub mem_accuracy_at_rsn_test_crossing: Option<f64>,
    pub checkpoints: Vec<usize>,
    pub wall_clock_secs: f64,
}

/// ΔL of the memory split against the reasoning training split at `epoch`.
pub fn delta_l_at(records: &[MetricsRecord], epoch: usize) -> Option<f64> {
    let mem = record_at(records, Split::Mem, epoch)?;
    let rsn = record_at(records, Split::RsnTrain, epoch)?;
    delta_l(mem.loss, rsn.loss).ok()
}

pub fn summarize(cfg: &ExperimentConfig, t: &TrainSummary, secs: f64) -> RunSummary {
    let last = t.records.iter().map(|r| r.epoch).max().unwrap_or(0);
    let rsn_test = first_crossing(&t.records, Split::RsnTest, 0.9);
    RunSummary {
        name: cfg.name.clone(),
        version: version_string(),
        epochs_run: t.epochs_run,
        final_metrics: t
            .records
            .iter()
            .filter(|r| r.epoch == last)
            .copied()
            .collect(),
        delta_l_final: delta_l_at(&t.records, last),
        first_rsn_test_crossing_09: rsn_test,
        first_rsn_train_crossing_09: first_crossing(&t.records, Split::RsnTrain, 0.9),
        mem_accuracy_at_rsn_test_crossing: rsn_test
            .and_then(|e| record_at(&t.records, Split::Mem, e))
            .map(|r| r.accuracy),
        checkpoints: t.checkpoints.clone(),
        wall_clock_secs: secs,
    }
}

/// The whole pipeline into `run`, which must be new or empty.
pub fn run_experiment(cfg: &ExperimentConfig, run: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    fresh_dir(run)?;
    with_manifest(run, || {
        let start = Instant::now();
        write_config(cfg, run)?;
        let data = gen_data_stage(cfg, run)?;
        let t = train_stage(cfg, run, &data)?;
        analysis_stage(cfg, run, &data)?;
        let s = summarize(cfg, &t, start.elapsed().as_secs_f64());
        output::write_json(&run.join("summary.json"), &s)?;
        Ok(s)
    })
}

/// Re-runs the analyses of an existing run directory from its dataset and
/// checkpoints, replacing the analysis files and the manifest.
pub fn reanalyze(cfg: &ExperimentConfig, run: &Path) -> Result<Vec<Value>> {
    let data = load_dataset(&run.join("dataset.csv"), &cfg.task)?;
    let out = run.join(ANALYSIS_DIR);
    if out.exists() {
        std::fs::remove_dir_all(&out)?;
    }
    with_manifest(run, || analysis_stage(cfg, run, &data))
}

pub fn read_run_metrics(run: &Path) -> Result<Vec<MetricsRecord>> {
    Ok(read_metrics_csv(&run.join("metrics.csv"))?)
}

/// `<root>/<name>-<unix seconds>`, with a numeric suffix if taken.
pub fn timestamped_dir(root: &Path, name: &str) -> PathBuf {
    let secs = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let base = root.join(format!("{name}-{secs}"));
    let mut dir = base.clone();
    let mut n = 1;
    while dir.exists() {
        dir = PathBuf::from(format!("{}-{n}", base.display()));
        n += 1;
    }
    dir
}
