//! Experiment configuration files: JSON, versioned, unknown keys rejected.

use std::path::{Path, PathBuf};

use biaslab::models::{ModelConfig, ModelFamily};
use biaslab::tasks::{TaskSpec, Token};
use biaslab::training::{Split, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::{CliError, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// When an analysis reads its checkpoint.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum At {
    #[default]
    Final,
    Epoch(usize),
    /// Share of the configured epochs, rounded to the nearest epoch.
    Fraction(f64),
}

impl At {
    pub fn resolve(self, epochs: usize) -> usize {
        match self {
            At::Final => epochs,
            At::Epoch(e) => e,
            At::Fraction(f) => (f * epochs as f64).round() as usize,
        }
    }
}

/// A named token range of the task or an explicit list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TokenSet {
    Named(NamedSet),
    List(Vec<Token>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NamedSet {
    Mem,
    Rsn,
    Keys,
}

impl TokenSet {
    pub fn tokens(&self, spec: &TaskSpec) -> Vec<Token> {
        match self {
            TokenSet::Named(NamedSet::Mem) => spec.mem_anchor_range.iter().collect(),
            TokenSet::Named(NamedSet::Rsn) => spec.rsn_anchor_range.iter().collect(),
            TokenSet::Named(NamedSet::Keys) => spec.key_range.iter().collect(),
            TokenSet::List(v) => v.clone(),
        }
    }

    pub fn label(&self) -> String {
        match self {
            TokenSet::Named(n) => serde_json::to_value(n)
                .ok()
                .and_then(|v| v.as_str().map(str::to_string))
                .unwrap_or_default(),
            TokenSet::List(_) => "list".into(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TheoryFormChoice {
    Fitted,
    Derived,
}

fn default_k() -> usize {
    2
}
fn default_sequences() -> usize {
    1000
}
fn default_profiles() -> usize {
    4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AnalysisRequest {
    Similarity {
        tokens: TokenSet,
        #[serde(default)]
        at: At,
    },
    Pca {
        tokens: TokenSet,
        #[serde(default = "default_k")]
        k: usize,
        #[serde(default)]
        at: At,
    },
    Svd {
        matrix: String,
        #[serde(default = "default_k")]
        k: usize,
        #[serde(default)]
        at: At,
    },
    AttentionError {
        split: Split,
        #[serde(default = "default_sequences")]
        max_sequences: usize,
        #[serde(default)]
        at: At,
    },
    LastRow {
        split: Split,
        #[serde(default = "default_profiles")]
        n_sequences: usize,
        #[serde(default)]
        at: At,
    },
    CompareTheory {
        tokens: TokenSet,
        form: TheoryFormChoice,
        #[serde(default)]
        at: At,
    },
}

impl AnalysisRequest {
    pub fn at(&self) -> At {
        match self {
            AnalysisRequest::Similarity { at, .. }
            | AnalysisRequest::Pca { at, .. }
            | AnalysisRequest::Svd { at, .. }
            | AnalysisRequest::AttentionError { at, .. }
            | AnalysisRequest::LastRow { at, .. }
            | AnalysisRequest::CompareTheory { at, .. } => *at,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            AnalysisRequest::Similarity { .. } => "similarity",
            AnalysisRequest::Pca { .. } => "pca",
            AnalysisRequest::Svd { .. } => "svd",
            AnalysisRequest::AttentionError { .. } => "attention_error",
            AnalysisRequest::LastRow { .. } => "last_row",
            AnalysisRequest::CompareTheory { .. } => "compare_theory",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub name: String,
    pub task: TaskSpec,
    /// Dataset size before the split.
    pub n_samples: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Extra checkpoint epochs; the final epoch and every epoch an analysis
    /// reads are always saved.
    #[serde(default)]
    pub checkpoints: Vec<At>,
    #[serde(default)]
    pub analyses: Vec<AnalysisRequest>,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!(
                "schema_version: expected {SCHEMA_VERSION}, found {}",
                self.schema_version
            ));
        }
        self.task
            .validate()
            .map_err(|e| CliError::Config(format!("task: {e}")))?;
        self.model
            .validate()
            .map_err(|e| CliError::Config(format!("model: {e}")))?;
        self.train
            .validate()
            .map_err(|e| CliError::Config(format!("train: {e}")))?;
        if self.task.vocab_size != self.model.d_vob {
            return bad(format!(
                "model.d_vob: {} disagrees with task.vocab_size {}",
                self.model.d_vob, self.task.vocab_size
            ));
        }
        if self.model.family == ModelFamily::DecoderTransformer
            && self.task.seq_len > self.model.max_seq_len
        {
            return bad(format!(
                "model.max_seq_len: {} is shorter than task.seq_len {}",
                self.model.max_seq_len, self.task.seq_len
            ));
        }
        if self.model.family == ModelFamily::EmbMlp && self.task.seq_len != self.task.q + 1 {
            return bad(format!(
                "task.seq_len: the Emb-MLP reads key plus anchors only, so seq_len must be q + 1 = {}",
                self.task.q + 1
            ));
        }
        for at in self.checkpoint_epochs_raw() {
            self.check_epoch("checkpoints", at)?;
        }
        for (i, a) in self.analyses.iter().enumerate() {
            self.check_epoch(
                &format!("analyses[{i}].at"),
                a.at().resolve(self.train.epochs),
            )?;
            let needs_decoder = matches!(
                a,
                AnalysisRequest::AttentionError { .. } | AnalysisRequest::LastRow { .. }
            );
            if needs_decoder && self.model.family != ModelFamily::DecoderTransformer {
                return bad(format!(
                    "analyses[{i}]: {} needs the decoder transformer",
                    a.kind()
                ));
            }
            if let AnalysisRequest::Svd { matrix, .. } = a {
                if !self
                    .model
                    .param_shapes()
                    .iter()
                    .any(|(n, _, _)| n == matrix)
                {
                    return bad(format!("analyses[{i}].matrix: no parameter named {matrix}"));
                }
            }
        }
        Ok(())
    }

    fn checkpoint_epochs_raw(&self) -> Vec<usize> {
        self.checkpoints
            .iter()
            .map(|a| a.resolve(self.train.epochs))
            .collect()
    }

    fn check_epoch(&self, field: &str, e: usize) -> Result<()> {
        let t = &self.train;
        if e > t.epochs {
            return Err(CliError::Config(format!(
                "{field}: epoch {e} is past the last epoch {}",
                t.epochs
            )));
        }
        // Checkpoints are taken when the splits are evaluated.
        if e != t.epochs && e % t.eval_every != 0 {
            return Err(CliError::Config(format!(
                "{field}: epoch {e} is not an evaluation epoch (eval_every = {})",
                t.eval_every
            )));
        }
        Ok(())
    }

    /// Every epoch whose checkpoint is written, ascending.
    pub fn checkpoint_epochs(&self) -> Vec<usize> {
        let mut v = self.checkpoint_epochs_raw();
        v.extend(
            self.analyses
                .iter()
                .map(|a| a.at().resolve(self.train.epochs)),
        );
        v.push(self.train.epochs);
        v.sort_unstable();
        v.dedup();
        v
    }

    /// Applies `--seed` to the task, model and shuffle seeds.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.task.seed = seed;
        self.model.seed = seed;
        self.train.seed = seed;
        self
    }
}
