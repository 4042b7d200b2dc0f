//! Closed-form oracles: label laws, gradient-flow directions, the
//! Gaussian-bump embedding approximation and cliff-sequence machinery.
//!
//! Label laws are indexed by token id over the whole vocabulary, so
//! `probs[i] = P(Y^s = i)`. All laws here describe the full (unmasked) task
//! with the generator's even split between memory and reasoning sequences.
//! Memory labels are random draws fixed once per tuple; their law is taken in
//! expectation over those draws.

mod cliff;
mod embedding;
pub mod enumerate;
mod flow;

pub use cliff::{
    ideal_cliff_construction, is_cliff, softmax_concentration, verify_cliff_construction,
    Assumption, AssumptionCheck, CliffCondition, CliffConstruction, CliffReport, CliffVerdict,
    Concentration, ConstructionConditions,
};
pub use embedding::{
    gaussian_approx_params, theoretical_embedding, EmbeddingConstants, EmbeddingForm,
    GaussianParams, TheoreticalEmbedding,
};
pub use flow::{
    embmlp_flow_prediction, one_layer_wv_gradient, transformer_flow_prediction, wv_flow_prediction,
    WvFlow,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tasks::{anchor_group, MemLabelMode, TaskError, TaskSpec, Token, TokenRange};
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum TheoryError {
    #[error("token {token} is not a {role:?} token for this task")]
    RoleMismatch { token: Token, role: Role },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("unsupported configuration: {0}")]
    Unsupported(String),
    #[error("sequence rejected: {0}")]
    Sequence(String),
    #[error("{0}")]
    NotACliff(String),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = TheoryError> = std::result::Result<T, E>;

/// Where a token sits in the task, which fixes the law of the labels it is
/// seen with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    MemAnchor,
    RsnAnchor,
    /// A key in sequences with no noise positions (`seq_len = q + 1`).
    Key,
    /// A key-range token counted at every position it occupies, as the key
    /// or as noise.
    KeyWithNoise,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Self::MemAnchor => "mem_anchor",
            Self::RsnAnchor => "rsn_anchor",
            Self::Key => "key",
            Self::KeyWithNoise => "key_with_noise",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        [
            Self::MemAnchor,
            Self::RsnAnchor,
            Self::Key,
            Self::KeyWithNoise,
        ]
        .into_iter()
        .find(|r| r.name() == s)
    }

    fn range(self, spec: &TaskSpec) -> TokenRange {
        match self {
            Self::MemAnchor => spec.mem_anchor_range,
            Self::RsnAnchor => spec.rsn_anchor_range,
            Self::Key | Self::KeyWithNoise => spec.key_range,
        }
    }

    pub(crate) fn check(self, spec: &TaskSpec, token: Token) -> Result<()> {
        if self.range(spec).contains(token) {
            Ok(())
        } else {
            Err(TheoryError::RoleMismatch { token, role: self })
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelDistribution {
    pub token: Token,
    pub role: Role,
    pub probs: Vec<f64>,
}

impl LabelDistribution {
    pub fn total(&self) -> f64 {
        self.probs.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.probs
            .iter()
            .enumerate()
            .map(|(i, p)| i as f64 * p)
            .sum()
    }

    /// Half the L1 distance; vectors of different length are zero-padded.
    pub fn total_variation(&self, other: &[f64]) -> f64 {
        let n = self.probs.len().max(other.len());
        let at = |v: &[f64], i: usize| v.get(i).copied().unwrap_or(0.0);
        0.5 * (0..n)
            .map(|i| (at(&self.probs, i) - at(other, i)).abs())
            .sum::<f64>()
    }
}

/// Coefficients of `(1 + x + ... + x^k)^n`, index `j` holding the
/// coefficient of `x^j`.
///
/// # Panics
/// If a coefficient overflows `u128`.
pub fn combo_row(n: usize, k_plus_1: usize) -> Vec<u128> {
    assert!(k_plus_1 >= 1, "k_plus_1 must be positive");
    let mut row = vec![1u128];
    for _ in 0..n {
        let mut next = vec![0u128; row.len() + k_plus_1 - 1];
        for (j, &c) in row.iter().enumerate() {
            if c == 0 {
                continue;
            }
            for slot in &mut next[j..j + k_plus_1] {
                *slot = slot
                    .checked_add(c)
                    .expect("combination number overflows u128");
            }
        }
        row = next;
    }
    row
}

/// Coefficient of `x^j` in `(1 + x + ... + x^k)^n`; zero outside `[0, kn]`.
pub fn combo_number(n: usize, j: i64, k_plus_1: usize) -> u128 {
    if j < 0 {
        return 0;
    }
    combo_row(n, k_plus_1).get(j as usize).copied().unwrap_or(0)
}

/// Law of the sum of `n` independent uniform draws from `range`, as
/// `(value, probability)` pairs in increasing value order.
pub fn sum_law(range: TokenRange, n: usize) -> Vec<(i64, f64)> {
    let width = range.len();
    let row = combo_row(n, width);
    let total = (width as f64).powi(n as i32);
    let base = n as i64 * i64::from(range.lo);
    row.iter()
        .enumerate()
        .map(|(j, &c)| (base + j as i64, c as f64 / total))
        .collect()
}

fn add_at(probs: &mut [f64], label: i64, w: f64) -> Result<()> {
    match usize::try_from(label).ok().and_then(|i| probs.get_mut(i)) {
        Some(slot) => {
            *slot += w;
            Ok(())
        }
        None => Err(TheoryError::Unsupported(format!(
            "label {label} falls outside the vocabulary of {}",
            probs.len()
        ))),
    }
}

fn add_uniform(probs: &mut [f64], range: TokenRange, w: f64) -> Result<()> {
    let each = w / range.len() as f64;
    for t in range.iter() {
        add_at(probs, i64::from(t), each)?;
    }
    Ok(())
}

/// Key law fed to [`memory_label_law`].
#[derive(Clone, Copy, Debug)]
enum KeyLaw {
    Uniform,
    Fixed(Token),
}

/// Law of a memory label given the key law and, optionally, one anchor slot
/// pinned to `fixed` (the token whose law is being computed). Weighted by
/// total probability `w`.
fn add_memory_law(
    spec: &TaskSpec,
    probs: &mut [f64],
    key: KeyLaw,
    fixed: Option<Token>,
    w: f64,
) -> Result<()> {
    match &spec.mem_label_mode {
        MemLabelMode::UniformOverKeys => add_uniform(probs, spec.key_range, w),
        MemLabelMode::AnchorDependentWindow => {
            let sums = match fixed {
                Some(s) => sum_law(spec.mem_anchor_range, spec.q - 1)
                    .into_iter()
                    .map(|(v, p)| (v + i64::from(s), p))
                    .collect(),
                None => sum_law(spec.mem_anchor_range, spec.q),
            };
            let keys: Vec<(Token, f64)> = match key {
                KeyLaw::Uniform => {
                    let n = spec.key_range.len() as f64;
                    spec.key_range.iter().map(|z| (z, 1.0 / n)).collect()
                }
                KeyLaw::Fixed(z) => vec![(z, 1.0)],
            };
            for &(z, pz) in &keys {
                for &(sum, ps) in &sums {
                    let range = spec.memory_label_range(z, &[sum as Token]);
                    add_uniform(probs, range, w * pz * ps)?;
                }
            }
            Ok(())
        }
        MemLabelMode::GroupedRanges(groups) => {
            // The group depends on the whole tuple, so tuples are walked
            // explicitly. Each tuple counts once per slot holding `fixed`.
            let tuples = spec.memory_combos();
            let weights: Vec<f64> = tuples
                .iter()
                .map(|t| match fixed {
                    Some(s) => t.iter().filter(|&&a| a == s).count() as f64,
                    None => 1.0,
                })
                .collect();
            let total: f64 = weights.iter().sum();
            for (t, wt) in tuples.iter().zip(&weights) {
                if *wt > 0.0 {
                    add_uniform(probs, groups[anchor_group(t, groups.len())], w * wt / total)?;
                }
            }
            Ok(())
        }
    }
}

/// Adds `w * P(offset + Z + sum of n reasoning anchors = i)` with `Z`
/// uniform on the key range (or pinned when `key` is fixed).
fn add_reasoning_law(
    spec: &TaskSpec,
    probs: &mut [f64],
    key: KeyLaw,
    offset: i64,
    n: usize,
    w: f64,
) -> Result<()> {
    let sums = sum_law(spec.rsn_anchor_range, n);
    match key {
        KeyLaw::Fixed(z) => {
            for &(v, p) in &sums {
                add_at(probs, offset + i64::from(z) + v, w * p)?;
            }
        }
        KeyLaw::Uniform => {
            let pz = 1.0 / spec.key_range.len() as f64;
            for z in spec.key_range.iter() {
                for &(v, p) in &sums {
                    add_at(probs, offset + i64::from(z) + v, w * pz * p)?;
                }
            }
        }
    }
    Ok(())
}

/// `P^s` for token `s` in `role`.
///
/// * memory anchor: the memory label law with one slot pinned to `s`
///   (`delta_Z / N_Z` under uniform labels, independent of `s`);
/// * reasoning anchor: `P(Z + sum of q-1 anchors = i - s)`;
/// * key: half memory law with the key pinned, half `P(s + sum of q anchors = i)`;
/// * key with noise: weight `1/(L-q)` on the key law, the rest on the
///   dataset-wide label law (a noise token carries no information about the
///   label).
pub fn label_distribution(spec: &TaskSpec, s: Token, role: Role) -> Result<LabelDistribution> {
    spec.validate()?;
    role.check(spec, s)?;
    let mut probs = vec![0.0; spec.vocab_size];
    match role {
        Role::MemAnchor => add_memory_law(spec, &mut probs, KeyLaw::Uniform, Some(s), 1.0)?,
        Role::RsnAnchor => add_reasoning_law(
            spec,
            &mut probs,
            KeyLaw::Uniform,
            i64::from(s),
            spec.q - 1,
            1.0,
        )?,
        Role::Key => add_key_law(spec, &mut probs, s, 1.0)?,
        Role::KeyWithNoise => {
            let slots = (spec.seq_len - spec.q) as f64;
            add_key_law(spec, &mut probs, s, 1.0 / slots)?;
            add_global_law(spec, &mut probs, (slots - 1.0) / slots)?;
        }
    }
    Ok(LabelDistribution {
        token: s,
        role,
        probs,
    })
}

fn add_key_law(spec: &TaskSpec, probs: &mut [f64], s: Token, w: f64) -> Result<()> {
    add_memory_law(spec, probs, KeyLaw::Fixed(s), None, 0.5 * w)?;
    add_reasoning_law(spec, probs, KeyLaw::Fixed(s), 0, spec.q, 0.5 * w)
}

fn add_global_law(spec: &TaskSpec, probs: &mut [f64], w: f64) -> Result<()> {
    add_memory_law(spec, probs, KeyLaw::Uniform, None, 0.5 * w)?;
    add_reasoning_law(spec, probs, KeyLaw::Uniform, 0, spec.q, 0.5 * w)
}

/// Label law of a sequence drawn from the whole dataset.
pub fn global_label_law(spec: &TaskSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    let mut probs = vec![0.0; spec.vocab_size];
    add_global_law(spec, &mut probs, 1.0)?;
    Ok(probs)
}

/// Reasoning-anchor law for `q = 2` written as the ramp / flat / ramp
/// trapezoid of a sum of two uniforms. Needs `N_Z >= N_A`, otherwise the
/// flat part is empty and the pieces overlap.
pub fn rsn_anchor_q2_piecewise(spec: &TaskSpec, s: Token) -> Result<Vec<f64>> {
    spec.validate()?;
    Role::RsnAnchor.check(spec, s)?;
    if spec.q != 2 {
        return Err(TheoryError::Unsupported(format!(
            "piecewise form needs q = 2, got {}",
            spec.q
        )));
    }
    let (nz, na) = (
        spec.key_range.len() as i64,
        spec.rsn_anchor_range.len() as i64,
    );
    if nz < na {
        return Err(TheoryError::Unsupported(format!(
            "piecewise form needs at least as many keys ({nz}) as reasoning anchors ({na})"
        )));
    }
    let lo = i64::from(s) + i64::from(spec.key_range.lo) + i64::from(spec.rsn_anchor_range.lo);
    let hi = i64::from(s) + i64::from(spec.key_range.hi) + i64::from(spec.rsn_anchor_range.hi);
    let denom = (nz * na) as f64;
    let mut probs = vec![0.0; spec.vocab_size];
    for i in lo..=hi {
        let count = if i < lo + na - 1 {
            i - lo + 1
        } else if i > hi - na + 1 {
            hi - i + 1
        } else {
            na
        };
        add_at(&mut probs, i, count as f64 / denom)?;
    }
    Ok(probs)
}

/// Key law for `q = 2` under uniform memory labels: half `delta_Z / N_Z`
/// plus half the triangle `(N_A - |a_max + a_min - (i - s)|)_+ / N_A^2`.
pub fn key_q2_closed_form(spec: &TaskSpec, s: Token) -> Result<Vec<f64>> {
    spec.validate()?;
    Role::Key.check(spec, s)?;
    if spec.q != 2 || spec.mem_label_mode != MemLabelMode::UniformOverKeys {
        return Err(TheoryError::Unsupported(
            "closed key form needs q = 2 and uniform memory labels".into(),
        ));
    }
    let na = spec.rsn_anchor_range.len() as i64;
    let centre = i64::from(spec.rsn_anchor_range.lo) + i64::from(spec.rsn_anchor_range.hi);
    let nz = spec.key_range.len() as f64;
    let mut probs = vec![0.0; spec.vocab_size];
    for (i, slot) in probs.iter_mut().enumerate() {
        let mut p = 0.0;
        if spec.key_range.contains(i as Token) {
            p += 0.5 / nz;
        }
        let tri = (na - (centre - (i as i64 - i64::from(s))).abs()).max(0);
        p += 0.5 * tri as f64 / (na * na) as f64;
        *slot = p;
    }
    Ok(probs)
}

/// Expected number of occurrences of `s` per training sequence in `role`.
pub fn token_ratio(spec: &TaskSpec, s: Token, role: Role) -> Result<f64> {
    role.check(spec, s)?;
    let q = spec.q as f64;
    Ok(match role {
        Role::MemAnchor => 0.5 * q / spec.mem_anchor_range.len() as f64,
        Role::RsnAnchor => 0.5 * q / spec.rsn_anchor_range.len() as f64,
        Role::Key => 1.0 / spec.key_range.len() as f64,
        Role::KeyWithNoise => (spec.seq_len - spec.q) as f64 / spec.key_range.len() as f64,
    })
}
