//! First-layer averaging error and second-layer last-row score profiles.

use serde::{Deserialize, Serialize};

use super::{quantile, AnalysisError, Result, SimilarityMatrix};
use crate::linalg::spearman;
use crate::models::{ModelCheckpoint, ModelFamily};
use crate::tasks::{Sample, Token};
use crate::theory::{is_cliff, CliffVerdict};

/// Sequences per forward pass.
const CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionErrorSummary {
    /// Entries `k <= j` measured, over all sequences and heads.
    pub n_entries: usize,
    /// Median and 90th percentile of `|A_jk - 1/j| * j`.
    pub median_relative_error: f64,
    pub p90_relative_error: f64,
    pub max_relative_error: f64,
    /// Fraction of entries with `|A_jk - 1/j| > 0.05`.
    pub frac_abs_error_above_005: f64,
    /// First-layer attention of head 0 averaged over the sequences.
    pub mean_attention: Vec<Vec<f64>>,
}

fn require_decoder(ckpt: &ModelCheckpoint) -> Result<()> {
    if ckpt.config.family != ModelFamily::DecoderTransformer {
        return Err(AnalysisError::Unsupported(format!(
            "attention diagnostics need a {} checkpoint, got {}",
            ModelFamily::DecoderTransformer.name(),
            ckpt.config.family.name()
        )));
    }
    Ok(())
}

fn same_length(samples: &[Sample]) -> Result<usize> {
    let l = samples
        .first()
        .map(|s| s.tokens.len())
        .ok_or(AnalysisError::TooFewTokens { need: 1, got: 0 })?;
    if samples.iter().any(|s| s.tokens.len() != l) {
        return Err(AnalysisError::Unsupported(
            "sequences of different lengths".into(),
        ));
    }
    Ok(l)
}

/// How far the first layer's causal attention is from the uniform average
/// `1/j` over the first `j` positions, row `j` 1-based.
pub fn attention_average_error(
    ckpt: &ModelCheckpoint,
    samples: &[Sample],
) -> Result<AttentionErrorSummary> {
    require_decoder(ckpt)?;
    let l = same_length(samples)?;
    let mut rel = Vec::new();
    let mut above = 0usize;
    let mut mean = vec![vec![0.0; l]; l];
    for chunk in samples.chunks(CHUNK) {
        let tokens: Vec<Token> = chunk
            .iter()
            .flat_map(|s| s.tokens.iter().copied())
            .collect();
        let (_, trace) = ckpt.decoder_trace(&tokens, l)?;
        for (h, a) in trace.attention[0].iter().enumerate() {
            for b in 0..chunk.len() {
                for j in 1..=l {
                    let row = a.row(b * l + j - 1);
                    let uniform = 1.0 / j as f64;
                    for (k, &x) in row.iter().enumerate().take(j) {
                        let err = (x - uniform).abs();
                        rel.push(err * j as f64);
                        above += usize::from(err > 0.05);
                        if h == 0 {
                            mean[j - 1][k] += x / samples.len() as f64;
                        }
                    }
                }
            }
        }
    }
    rel.sort_by(f64::total_cmp);
    let n = rel.len();
    Ok(AttentionErrorSummary {
        n_entries: n,
        median_relative_error: quantile(&rel, 0.5).unwrap_or(0.0),
        p90_relative_error: quantile(&rel, 0.9).unwrap_or(0.0),
        max_relative_error: rel.last().copied().unwrap_or(0.0),
        frac_abs_error_above_005: above as f64 / n.max(1) as f64,
        mean_attention: mean,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadProfile {
    /// Pre-softmax scores of the last query against every position.
    pub scores: Vec<f64>,
    pub verdict: CliffVerdict,
    /// Spearman of scores against position over `1..=p`; `None` for `p < 2`.
    pub prefix_trend: Option<f64>,
    /// Mean score after the anchor block minus the first score; `None` when
    /// the block ends the sequence.
    pub tail_minus_first: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LastRowProfile {
    pub p: usize,
    pub q: usize,
    /// One entry per head of the second layer.
    pub heads: Vec<HeadProfile>,
    /// Cosines between the position embeddings of the sequence's positions.
    pub position_cosines: SimilarityMatrix,
}

/// Second-layer last-row scores for one sequence, with the cliff verdict at
/// the sequence's key position.
pub fn last_row_attention_profile(
    ckpt: &ModelCheckpoint,
    sample: &Sample,
    q: usize,
) -> Result<LastRowProfile> {
    require_decoder(ckpt)?;
    if ckpt.config.n_layers < 2 {
        return Err(AnalysisError::Unsupported(
            "last-row profile needs at least two layers".into(),
        ));
    }
    let l = sample.tokens.len();
    let p = sample.key_pos;
    let (_, trace) = ckpt.decoder_trace(&sample.tokens, l)?;
    let heads = trace.scores[1]
        .iter()
        .map(|s| {
            let scores = s.row(l - 1).to_vec();
            let prefix_trend = (p >= 2)
                .then(|| spearman(&scores[..p], &(1..=p).map(|i| i as f64).collect::<Vec<_>>()))
                .flatten();
            let tail = scores.get(p + q..).unwrap_or(&[]);
            let tail_minus_first = (!tail.is_empty())
                .then(|| tail.iter().sum::<f64>() / tail.len() as f64 - scores[0]);
            HeadProfile {
                verdict: is_cliff(&scores, p, q),
                scores,
                prefix_trend,
                tail_minus_first,
            }
        })
        .collect();
    Ok(LastRowProfile {
        p,
        q,
        heads,
        position_cosines: position_cosine_profile(ckpt, l)?,
    })
}

/// Cosines between rows `0..len` of the position table; tokens in the
/// result are the 1-based positions.
pub fn position_cosine_profile(ckpt: &ModelCheckpoint, len: usize) -> Result<SimilarityMatrix> {
    let pos = ckpt.param("pos")?;
    if len > pos.rows() {
        return Err(AnalysisError::Unsupported(format!(
            "{len} positions, table has {}",
            pos.rows()
        )));
    }
    let rows: Vec<Vec<f64>> = (0..len).map(|i| pos.row(i).to_vec()).collect();
    let labels: Vec<Token> = (1..=len as Token).collect();
    Ok(SimilarityMatrix::from_rows(&labels, &rows))
}
