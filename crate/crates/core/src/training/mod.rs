//! AdamW training on last-position cross-entropy, split evaluation and the
//! full-dataset embedding-gradient probe.

mod adamw;
mod gradcheck;
mod metrics;

pub use adamw::{clip_global_norm, global_grad_norm, AdamW};
pub use gradcheck::{
    gradient_check, loss_and_gradients, random_samples, GradientCheck, ParamCheck,
};
pub use metrics::{
    first_crossing, read_metrics_csv, record_at, version_string, write_run_metadata, CsvSink,
    FnSink, MemorySink, MetricsRecord, MetricsSink, RunMetadata, Split, Tee,
};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::{ModelCheckpoint, ModelError};
use crate::rng;
use crate::tasks::{DatasetSplit, Sample, Token};
use crate::tensor::{Graph, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("label {label} does not fit the model's {outputs} outputs")]
    LabelOutOfRange { label: Token, outputs: usize },
    #[error("metrics: {0}")]
    Metrics(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

fn default_betas() -> [f64; 2] {
    [0.9, 0.999]
}
fn default_eps() -> f64 {
    1e-8
}
fn default_wd() -> f64 {
    0.01
}
fn default_clip() -> f64 {
    1.0
}
fn default_one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    #[serde(default = "default_betas")]
    pub betas: [f64; 2],
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default = "default_one")]
    pub eval_every: usize,
    /// Seed for the per-epoch shuffles.
    #[serde(default)]
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be finite and >= 0");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be > 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if self.eval_every == 0 {
            return bad("eval_every must be >= 1");
        }
        Ok(())
    }
}

/// `(a - b) / b`, the relative loss gap.
pub fn delta_l(loss_a: f64, loss_b: f64) -> Result<f64> {
    if loss_b == 0.0 {
        return Err(TrainError::Metrics(
            "relative loss gap with a zero reference loss".into(),
        ));
    }
    Ok((loss_a - loss_b) / loss_b)
}

fn flatten(samples: &[&Sample]) -> (Vec<Token>, Vec<usize>) {
    let mut tokens = Vec::with_capacity(samples.iter().map(|s| s.tokens.len()).sum());
    let mut labels = Vec::with_capacity(samples.len());
    for s in samples {
        tokens.extend_from_slice(&s.tokens);
        labels.push(s.label as usize);
    }
    (tokens, labels)
}

fn seq_len_of(samples: &[&Sample]) -> usize {
    samples.first().map_or(0, |s| s.tokens.len())
}

const EVAL_CHUNK: usize = 1000;

/// Mean cross-entropy and argmax accuracy over `samples`. Ties in the argmax
/// go to the lowest index.
pub fn evaluate(model: &ModelCheckpoint, samples: &[Sample]) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let refs: Vec<&Sample> = samples.iter().collect();
    let parts: Vec<Result<(f64, usize)>> = refs
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| {
            let (tokens, labels) = flatten(chunk);
            let logits = model.logits(&tokens, seq_len_of(chunk))?;
            let mut loss = 0.0;
            let mut hits = 0;
            for (r, &y) in labels.iter().enumerate() {
                let row = logits.row(r);
                if y >= row.len() {
                    return Err(TrainError::LabelOutOfRange {
                        label: y as Token,
                        outputs: row.len(),
                    });
                }
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
                loss += lse - row[y];
                let arg = row
                    .iter()
                    .enumerate()
                    .fold(
                        (0, f64::NEG_INFINITY),
                        |b, (i, &x)| if x > b.1 { (i, x) } else { b },
                    )
                    .0;
                hits += usize::from(arg == y);
            }
            Ok((loss, hits))
        })
        .collect();
    let (mut loss, mut hits) = (0.0, 0);
    for p in parts {
        let (l, h) = p?;
        loss += l;
        hits += h;
    }
    let n = samples.len() as f64;
    Ok((loss / n, hits as f64 / n))
}

/// One record per non-empty split.
pub fn evaluate_splits(
    model: &ModelCheckpoint,
    data: &DatasetSplit,
    epoch: usize,
) -> Result<Vec<MetricsRecord>> {
    let mut out = Vec::with_capacity(3);
    for (split, samples) in [
        (Split::Mem, &data.d_mem),
        (Split::RsnTrain, &data.d_rsn_train),
        (Split::RsnTest, &data.d_rsn_test),
    ] {
        if samples.is_empty() {
            continue;
        }
        let (loss, accuracy) = evaluate(model, samples)?;
        out.push(MetricsRecord {
            epoch,
            split,
            loss,
            accuracy,
        });
    }
    Ok(out)
}

/// Summary of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub grad_norm: f64,
    pub clipped_norm: f64,
}

/// Forward, backward, clip and update on one batch. Gradients are zeroed
/// first, so the step does not depend on earlier calls.
pub fn train_step(
    model: &mut ModelCheckpoint,
    opt: &mut AdamW,
    batch: &[&Sample],
    clip_norm: f64,
) -> Result<StepStats> {
    let (tokens, labels) = flatten(batch);
    let mut g = Graph::new();
    let out = model.forward(&mut g, &tokens, seq_len_of(batch), true)?;
    let loss = g.cross_entropy(out.logits, &labels)?;
    let loss_value = g.value(loss).data()[0];
    let grads = g.backward(loss)?;
    model.zero_grads();
    for (name, v) in &out.params {
        grads.accumulate_into(*v, model.param_mut(name)?)?;
    }
    let grad_norm = clip_global_norm(&mut model.params, clip_norm);
    let clipped_norm = global_grad_norm(&model.params);
    opt.step(&mut model.params);
    Ok(StepStats {
        loss: loss_value,
        grad_norm,
        clipped_norm,
    })
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: ModelCheckpoint,
    pub epochs_run: usize,
    pub stopped_early: bool,
}

/// Mini-batch AdamW over `d_mem ∪ d_rsn_train`, shuffled each epoch from
/// stream `SHUFFLE_BASE + epoch` of `cfg.seed`. Evaluates every split at
/// epoch 0, every `eval_every` epochs and at the last epoch.
pub fn train(
    mut model: ModelCheckpoint,
    data: &DatasetSplit,
    cfg: &TrainConfig,
    sink: &mut dyn MetricsSink,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train_set: Vec<&Sample> = data.training().collect();
    if train_set.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }
    let outputs = model.config.n_outputs();
    if let Some(s) = data.all().find(|s| s.label as usize >= outputs) {
        return Err(TrainError::LabelOutOfRange {
            label: s.label,
            outputs,
        });
    }
    let mut opt = AdamW::new(cfg.lr, cfg.betas, cfg.eps, cfg.weight_decay);
    let start = model.epoch;

    if sink
        .record(&evaluate_splits(&model, data, start)?, &model)?
        .is_break()
    {
        return Ok(TrainOutcome {
            model,
            epochs_run: 0,
            stopped_early: true,
        });
    }
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for e in 1..=cfg.epochs {
        let epoch = start + e;
        order.sort_unstable();
        order.shuffle(&mut rng::stream(cfg.seed, rng::SHUFFLE_BASE + epoch as u64));
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Sample> = idx.iter().map(|&i| train_set[i]).collect();
            let stats = train_step(&mut model, &mut opt, &batch, cfg.clip_norm)?;
            if !stats.loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, batch: b });
            }
        }
        model.clear_grads();
        model.check_finite()?;
        model.epoch = epoch;
        if e % cfg.eval_every == 0 || e == cfg.epochs {
            let recs = evaluate_splits(&model, data, epoch)?;
            if sink.record(&recs, &model)?.is_break() {
                return Ok(TrainOutcome {
                    model,
                    epochs_run: e,
                    stopped_early: e < cfg.epochs,
                });
            }
        }
    }
    Ok(TrainOutcome {
        model,
        epochs_run: cfg.epochs,
        stopped_early: false,
    })
}

/// Exact gradient of the mean loss over `samples` with respect to the whole
/// embedding matrix (`d_vob x d_m`), without updating anything.
pub fn embedding_gradient(model: &ModelCheckpoint, samples: &[Sample]) -> Result<Tensor> {
    let emb_shape = model.param("emb")?.shape();
    if samples.is_empty() {
        return Ok(Tensor::zeros(emb_shape.0, emb_shape.1));
    }
    let refs: Vec<&Sample> = samples.iter().collect();
    let n = samples.len() as f64;
    let parts: Vec<Result<Tensor>> = refs
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| {
            let (tokens, labels) = flatten(chunk);
            let mut g = Graph::new();
            let out = model.forward(&mut g, &tokens, seq_len_of(chunk), true)?;
            let loss = g.cross_entropy(out.logits, &labels)?;
            // Chunk means are reweighted into the full-dataset mean.
            let loss = g.scale(loss, chunk.len() as f64 / n);
            let emb = out.params["emb"];
            Ok(g.backward(loss)?.get_or_zero(emb))
        })
        .collect();
    let mut total = Tensor::zeros(emb_shape.0, emb_shape.1);
    for p in parts {
        total = total.add(&p?)?;
    }
    Ok(total)
}

/// Full-dataset gradient of the loss with respect to the embedding row of
/// `token`. The gradient-flow direction is its negative. A token absent from
/// the data gets the zero vector.
pub fn embedding_gradient_probe(
    model: &ModelCheckpoint,
    samples: &[Sample],
    token: Token,
) -> Result<Vec<f64>> {
    let g = embedding_gradient(model, samples)?;
    if token as usize >= g.rows() {
        return Err(TrainError::Model(ModelError::TokenOutOfRange {
            token,
            vocab: g.rows(),
        }));
    }
    Ok(g.row(token as usize).to_vec())
}
