//! Read-only diagnostics on checkpoints: embedding similarity, PCA, SVD of
//! weight matrices, attention measurements and the theory comparison.
//!
//! A cosine involving a zero vector has no value; such entries are `None`
//! and listed in the matrix's `zero_norm` field.

mod attention;
mod compare;
pub mod output;

pub use attention::{
    attention_average_error, last_row_attention_profile, position_cosine_profile,
    AttentionErrorSummary, HeadProfile, LastRowProfile,
};
pub use compare::{compare_embedding_theory, EmbeddingComparison, PairComparison};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, cosine, spearman};
use crate::models::{ModelCheckpoint, ModelError};
use crate::tasks::Token;
use crate::tensor::Tensor;
use crate::theory::TheoryError;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("token {token} is outside the vocabulary of {vocab}")]
    TokenOutOfRange { token: Token, vocab: usize },
    #[error("need at least {need} tokens, got {got}")]
    TooFewTokens { need: usize, got: usize },
    #[error("{0}")]
    Unsupported(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Theory(#[from] TheoryError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = AnalysisError> = std::result::Result<T, E>;

fn embedding_rows(ckpt: &ModelCheckpoint, tokens: &[Token]) -> Result<Vec<Vec<f64>>> {
    let emb = ckpt.param("emb")?;
    tokens
        .iter()
        .map(|&t| {
            if t as usize >= emb.rows() {
                return Err(AnalysisError::TokenOutOfRange {
                    token: t,
                    vocab: emb.rows(),
                });
            }
            Ok(emb.row(t as usize).to_vec())
        })
        .collect()
}

/// Unweighted mean of the embedding rows of `tokens`.
pub fn mean_embedding(ckpt: &ModelCheckpoint, tokens: &[Token]) -> Result<Vec<f64>> {
    let rows = embedding_rows(ckpt, tokens)?;
    if rows.is_empty() {
        return Err(AnalysisError::TooFewTokens { need: 1, got: 0 });
    }
    let mut mean = vec![0.0; rows[0].len()];
    for r in &rows {
        for (m, x) in mean.iter_mut().zip(r) {
            *m += x / rows.len() as f64;
        }
    }
    Ok(mean)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub tokens: Vec<Token>,
    /// `values[i][j]` is the cosine of rows `tokens[i]` and `tokens[j]`.
    pub values: Vec<Vec<Option<f64>>>,
    /// Tokens whose row has zero norm.
    pub zero_norm: Vec<Token>,
}

impl SimilarityMatrix {
    pub fn from_rows(tokens: &[Token], rows: &[Vec<f64>]) -> Self {
        let n = tokens.len();
        let mut values = vec![vec![None; n]; n];
        let mut zero_norm = Vec::new();
        for i in 0..n {
            if rows[i].iter().all(|&x| x == 0.0) {
                zero_norm.push(tokens[i]);
                continue;
            }
            values[i][i] = Some(1.0);
            for j in i + 1..n {
                let c = cosine(&rows[i], &rows[j]);
                values[i][j] = c;
                values[j][i] = c;
            }
        }
        Self {
            tokens: tokens.to_vec(),
            values,
            zero_norm,
        }
    }

    /// `(s_i, s_j, cos)` over pairs `i < j` with a defined cosine.
    pub fn pairs(&self) -> Vec<(Token, Token, f64)> {
        let n = self.tokens.len();
        let mut out = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                if let Some(c) = self.values[i][j] {
                    out.push((self.tokens[i], self.tokens[j], c));
                }
            }
        }
        out
    }

    /// Mean cosine over distinct pairs.
    pub fn mean_off_diagonal(&self) -> Option<f64> {
        let p = self.pairs();
        (!p.is_empty()).then(|| p.iter().map(|x| x.2).sum::<f64>() / p.len() as f64)
    }

    /// Spearman correlation between the cosine and `-|s_i - s_j|`.
    pub fn distance_spearman(&self) -> Option<f64> {
        let p = self.pairs();
        let cos: Vec<f64> = p.iter().map(|x| x.2).collect();
        let dist: Vec<f64> = p
            .iter()
            .map(|x| -(f64::from(x.0) - f64::from(x.1)).abs())
            .collect();
        spearman(&cos, &dist)
    }
}

pub fn cosine_similarity_matrix(
    ckpt: &ModelCheckpoint,
    tokens: &[Token],
) -> Result<SimilarityMatrix> {
    let rows = embedding_rows(ckpt, tokens)?;
    Ok(SimilarityMatrix::from_rows(tokens, &rows))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaProjection {
    pub tokens: Vec<Token>,
    /// `coords[i][c]`: projection of token `i` on component `c`.
    pub coords: Vec<Vec<f64>>,
    /// Top-k covariance eigenvalues, descending.
    pub variances: Vec<f64>,
    /// Share of total variance per returned component.
    pub variance_ratio: Vec<f64>,
    /// Unit principal directions, first nonzero loading positive.
    pub directions: Vec<Vec<f64>>,
}

impl PcaProjection {
    /// Largest |Spearman| between a component and the token values.
    pub fn best_value_correlation(&self) -> Option<(usize, f64)> {
        let vals: Vec<f64> = self.tokens.iter().map(|&t| f64::from(t)).collect();
        (0..self.directions.len())
            .filter_map(|c| {
                let col: Vec<f64> = self.coords.iter().map(|r| r[c]).collect();
                spearman(&col, &vals).map(|s| (c, s))
            })
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
    }
}

/// PCA of arbitrary rows, the shared core of [`pca_project`].
pub fn pca_rows(tokens: &[Token], rows: &[Vec<f64>], k: usize) -> Result<PcaProjection> {
    if rows.len() < k || rows.is_empty() {
        return Err(AnalysisError::TooFewTokens {
            need: k.max(1),
            got: rows.len(),
        });
    }
    let (n, d) = (rows.len(), rows[0].len());
    if k > d {
        return Err(AnalysisError::Unsupported(format!(
            "{k} components from {d} dimensions"
        )));
    }
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, x) in mean.iter_mut().zip(r) {
            *m += x / n as f64;
        }
    }
    let centred: Vec<f64> = rows
        .iter()
        .flat_map(|r| r.iter().zip(&mean).map(|(x, m)| x - m))
        .collect();
    let x =
        Tensor::from_vec(n, d, centred).map_err(|e| AnalysisError::Unsupported(e.to_string()))?;
    let cov = x
        .transpose()
        .matmul(&x)
        .expect("shapes agree")
        .scale(1.0 / n as f64);
    let eig = linalg::symmetric_eigen(&cov);
    let total: f64 = eig.values.iter().map(|v| v.max(0.0)).sum();
    let directions: Vec<Vec<f64>> = (0..k)
        .map(|c| (0..d).map(|i| eig.vectors.get(i, c)).collect())
        .collect();
    let coords = (0..n)
        .map(|i| {
            directions
                .iter()
                .map(|dir| (0..d).map(|j| x.get(i, j) * dir[j]).sum())
                .collect()
        })
        .collect();
    let variances: Vec<f64> = eig.values[..k].iter().map(|v| v.max(0.0)).collect();
    let variance_ratio = variances
        .iter()
        .map(|v| if total > 0.0 { v / total } else { 0.0 })
        .collect();
    Ok(PcaProjection {
        tokens: tokens.to_vec(),
        coords,
        variances,
        variance_ratio,
        directions,
    })
}

pub fn pca_project(ckpt: &ModelCheckpoint, tokens: &[Token], k: usize) -> Result<PcaProjection> {
    let rows = embedding_rows(ckpt, tokens)?;
    pca_rows(tokens, &rows, k)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    pub name: String,
    /// All singular values, descending.
    pub singular_values: Vec<f64>,
    /// Top-k left singular vectors (length = matrix rows).
    pub left: Vec<Vec<f64>>,
    /// Top-k right singular vectors (length = matrix cols).
    pub right: Vec<Vec<f64>>,
}

impl SpectrumReport {
    pub fn from_matrix(name: &str, m: &Tensor, k: usize) -> Self {
        let s = linalg::svd(m);
        let k = k.min(s.sigma.len());
        let col = |t: &Tensor, c: usize| (0..t.rows()).map(|i| t.get(i, c)).collect::<Vec<f64>>();
        Self {
            name: name.to_string(),
            left: (0..k).map(|c| col(&s.u, c)).collect(),
            right: (0..k).map(|c| col(&s.v, c)).collect(),
            singular_values: s.sigma,
        }
    }

    /// `sigma_1 / sigma_2`; infinite when the second value is zero.
    pub fn top_ratio(&self) -> Option<f64> {
        match self.singular_values.as_slice() {
            [a, b, ..] => Some(if *b == 0.0 { f64::INFINITY } else { a / b }),
            _ => None,
        }
    }
}

pub fn svd_report(ckpt: &ModelCheckpoint, name: &str, k: usize) -> Result<SpectrumReport> {
    Ok(SpectrumReport::from_matrix(name, ckpt.param(name)?, k))
}

/// Linear-interpolated quantile of an ascending slice.
pub fn quantile(sorted: &[f64], q: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    Some(sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64))
}
