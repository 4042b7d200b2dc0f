//! Central finite differences against the tape gradients.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::{evaluate, flatten, seq_len_of, Result};
use crate::models::ModelCheckpoint;
use rand::Rng;

use crate::tasks::{Sample, SampleKind, Token};
use crate::tensor::{Graph, Tensor};

/// Mean loss over `samples` and its gradient for every parameter.
pub fn loss_and_gradients(
    model: &ModelCheckpoint,
    samples: &[Sample],
) -> Result<(f64, IndexMap<String, Tensor>)> {
    let refs: Vec<&Sample> = samples.iter().collect();
    let (tokens, labels) = flatten(&refs);
    let mut g = Graph::new();
    let out = model.forward(&mut g, &tokens, seq_len_of(&refs), true)?;
    let loss = g.cross_entropy(out.logits, &labels)?;
    let value = g.value(loss).data()[0];
    let grads = g.backward(loss)?;
    let map = out
        .params
        .iter()
        .map(|(n, v)| (n.clone(), grads.get_or_zero(*v)))
        .collect();
    Ok((value, map))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamCheck {
    pub name: String,
    /// `|autodiff - numeric| / max(|autodiff|, |numeric|)` in the Frobenius
    /// norm over the whole matrix; 0 when both vanish.
    pub rel_error: f64,
    pub max_abs_error: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientCheck {
    pub step: f64,
    pub params: Vec<ParamCheck>,
}

impl GradientCheck {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.rel_error).fold(0.0, f64::max)
    }
}

/// Perturbs every entry of every parameter by `+-step`.
pub fn gradient_check(
    model: &ModelCheckpoint,
    samples: &[Sample],
    step: f64,
) -> Result<GradientCheck> {
    let (_, auto) = loss_and_gradients(model, samples)?;
    let mut probe = model.clone();
    let mut params = Vec::with_capacity(auto.len());
    for (name, analytic) in &auto {
        let n = analytic.data().len();
        let mut numeric = vec![0.0; n];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let base = probe.param(name)?.data()[i];
            probe.param_mut(name)?.data_mut()[i] = base + step;
            let up = evaluate(&probe, samples)?.0;
            probe.param_mut(name)?.data_mut()[i] = base - step;
            let down = evaluate(&probe, samples)?.0;
            probe.param_mut(name)?.data_mut()[i] = base;
            *slot = (up - down) / (2.0 * step);
        }
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = analytic
            .data()
            .iter()
            .zip(&numeric)
            .map(|(a, b)| a - b)
            .collect();
        let scale = norm(analytic.data()).max(norm(&numeric));
        params.push(ParamCheck {
            name: name.clone(),
            rel_error: if scale == 0.0 {
                0.0
            } else {
                norm(&diff) / scale
            },
            max_abs_error: diff.iter().fold(0.0, |m, x| m.max(x.abs())),
            grad_norm: norm(analytic.data()),
        });
    }
    Ok(GradientCheck { step, params })
}

/// Uniform random tokens and labels, for checks that need no task structure.
pub fn random_samples(
    vocab: usize,
    outputs: usize,
    seq_len: usize,
    n: usize,
    seed: u64,
) -> Vec<Sample> {
    let mut r = crate::rng::stream(seed, crate::rng::MISC_BASE);
    (0..n)
        .map(|_| Sample {
            tokens: (0..seq_len)
                .map(|_| r.random_range(0..vocab as Token))
                .collect(),
            label: r.random_range(0..outputs as Token),
            kind: SampleKind::Memory,
            key_pos: 1,
        })
        .collect()
}
