//! Trained embedding cosines against the Gaussian-bump approximation.

use serde::{Deserialize, Serialize};

use super::{cosine_similarity_matrix, Result, SimilarityMatrix};
use crate::linalg::spearman;
use crate::models::ModelCheckpoint;
use crate::tasks::{TaskSpec, Token};
use crate::theory::{theoretical_embedding, EmbeddingForm, Role};

/// Pairs at most this far apart are flagged as near.
pub const NEAR_DISTANCE: u32 = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairComparison {
    pub s_i: Token,
    pub s_j: Token,
    pub distance: u32,
    pub empirical: Option<f64>,
    pub theory: Option<f64>,
    pub abs_diff: Option<f64>,
    pub near: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingComparison {
    pub role: Role,
    pub pairs: Vec<PairComparison>,
    pub empirical: SimilarityMatrix,
    pub theory: SimilarityMatrix,
}

impl EmbeddingComparison {
    /// Mean `|empirical - theory|` over pairs at distance `<= max_distance`.
    pub fn mean_abs_diff_within(&self, max_distance: u32) -> Option<f64> {
        let d: Vec<f64> = self
            .pairs
            .iter()
            .filter(|p| p.distance <= max_distance)
            .filter_map(|p| p.abs_diff)
            .collect();
        (!d.is_empty()).then(|| d.iter().sum::<f64>() / d.len() as f64)
    }

    pub fn empirical_distance_spearman(&self) -> Option<f64> {
        self.empirical.distance_spearman()
    }

    pub fn theory_distance_spearman(&self) -> Option<f64> {
        self.theory.distance_spearman()
    }

    /// Spearman between the empirical and theoretical cosines over pairs.
    pub fn cross_spearman(&self) -> Option<f64> {
        let (e, t): (Vec<f64>, Vec<f64>) = self
            .pairs
            .iter()
            .filter_map(|p| Some((p.empirical?, p.theory?)))
            .unzip();
        spearman(&e, &t)
    }
}

pub fn compare_embedding_theory(
    ckpt: &ModelCheckpoint,
    spec: &TaskSpec,
    tokens: &[Token],
    role: Role,
    form: &EmbeddingForm,
) -> Result<EmbeddingComparison> {
    let empirical = cosine_similarity_matrix(ckpt, tokens)?;
    let rows = tokens
        .iter()
        .map(|&s| {
            Ok(theoretical_embedding(
                spec,
                s,
                role,
                form,
                None::<(f64, &mut crate::rng::StreamRng)>,
            )?
            .vector)
        })
        .collect::<Result<Vec<_>>>()?;
    let theory = SimilarityMatrix::from_rows(tokens, &rows);
    let n = tokens.len();
    let mut pairs = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            let (e, t) = (empirical.values[i][j], theory.values[i][j]);
            let distance = tokens[i].abs_diff(tokens[j]);
            pairs.push(PairComparison {
                s_i: tokens[i],
                s_j: tokens[j],
                distance,
                empirical: e,
                theory: t,
                abs_diff: e.zip(t).map(|(a, b)| (a - b).abs()),
                near: distance <= NEAR_DISTANCE,
            });
        }
    }
    Ok(EmbeddingComparison {
        role,
        pairs,
        empirical,
        theory,
    })
}
