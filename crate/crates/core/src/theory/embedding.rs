//! Gaussian-bump approximation of trained embeddings.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{token_ratio, Result, Role, TheoryError};
use crate::tasks::{TaskSpec, Token, TokenRange};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianParams {
    pub mean: f64,
    pub std: f64,
}

fn uniform_moments(r: TokenRange) -> (f64, f64) {
    let n = r.len() as f64;
    (
        0.5 * (f64::from(r.lo) + f64::from(r.hi)),
        (n * n - 1.0) / 12.0,
    )
}

/// Exact mean and standard deviation of `Z + A_1 + ... + A_{q-1}` with
/// independent uniform key and reasoning anchors.
pub fn gaussian_approx_params(spec: &TaskSpec) -> GaussianParams {
    let (mz, vz) = uniform_moments(spec.key_range);
    let (ma, va) = uniform_moments(spec.rsn_anchor_range);
    let extra = spec.q.saturating_sub(1) as f64;
    GaussianParams {
        mean: mz + extra * ma,
        std: (vz + extra * va).sqrt(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "form")]
pub enum EmbeddingForm {
    /// `C1 (C2 exp(-(j - s)^2 / (2 sigma_P)) - 1/d_m)`.
    Derived(EmbeddingConstants),
    /// Fitted bump `exp(-(j - s)^2 / 12)`, minus `1/d_m` for reasoning anchors.
    Fitted { d_m: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingConstants {
    pub c1: f64,
    pub c2: f64,
    pub sigma_p: f64,
    pub mu: f64,
    pub d_m: usize,
}

impl EmbeddingConstants {
    /// `C1 = r_s lr / L`, `C2 = 1 / (sqrt(2 pi) sigma_P)`, with `mu` and
    /// `sigma_P` from [`gaussian_approx_params`].
    pub fn from_task(spec: &TaskSpec, s: Token, role: Role, lr: f64, d_m: usize) -> Result<Self> {
        let g = gaussian_approx_params(spec);
        Ok(Self {
            c1: token_ratio(spec, s, role)? * lr / spec.seq_len as f64,
            c2: 1.0 / ((2.0 * std::f64::consts::PI).sqrt() * g.std),
            sigma_p: g.std,
            mu: g.mean,
            d_m,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoreticalEmbedding {
    pub token: Token,
    pub role: Role,
    pub vector: Vec<f64>,
    pub form: EmbeddingForm,
    pub noise_std: f64,
}

/// Approximate embedding of `s`, centred at component `s`. With
/// `noise = Some((gamma, rng))` each component gets `N(0, d_m^-gamma)` noise
/// added; with `None` the vector is deterministic.
pub fn theoretical_embedding<R: Rng + ?Sized>(
    spec: &TaskSpec,
    s: Token,
    role: Role,
    form: &EmbeddingForm,
    noise: Option<(f64, &mut R)>,
) -> Result<TheoreticalEmbedding> {
    if !matches!(role, Role::RsnAnchor | Role::Key) {
        return Err(TheoryError::Unsupported(format!(
            "no embedding approximation for {role:?}"
        )));
    }
    role.check(spec, s)?;
    let d_m = match form {
        EmbeddingForm::Derived(c) => c.d_m,
        EmbeddingForm::Fitted { d_m } => *d_m,
    };
    let sf = f64::from(s);
    let mut vector: Vec<f64> = (0..d_m)
        .map(|j| {
            let dj = j as f64 - sf;
            match form {
                EmbeddingForm::Derived(c) => {
                    c.c1 * (c.c2 * (-dj * dj / (2.0 * c.sigma_p)).exp() - 1.0 / d_m as f64)
                }
                EmbeddingForm::Fitted { .. } => {
                    let bump = (-dj * dj / 12.0).exp();
                    if role == Role::RsnAnchor {
                        bump - 1.0 / d_m as f64
                    } else {
                        bump
                    }
                }
            }
        })
        .collect();
    let mut noise_std = 0.0;
    if let Some((gamma, rng)) = noise {
        noise_std = (d_m as f64).powf(-gamma);
        let normal =
            Normal::new(0.0, noise_std).map_err(|e| TheoryError::Unsupported(e.to_string()))?;
        for x in &mut vector {
            *x += normal.sample(rng);
        }
    }
    Ok(TheoreticalEmbedding {
        token: s,
        role,
        vector,
        form: form.clone(),
        noise_std,
    })
}
