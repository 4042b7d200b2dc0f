//! Self-check suites with machine-readable pass/fail reports.

use std::str::FromStr;

use biaslab::analysis::{attention_average_error, quantile};
use biaslab::linalg::cosine;
use biaslab::models::{ModelCheckpoint, ModelConfig, ModelFamily};
use biaslab::tasks::{
    balanced_enumeration, generate_dataset, MemLabelMode, Sample, TaskSpec, Token, TokenRange,
};
use biaslab::tensor::ActivationSpec;
use biaslab::theory::enumerate::enumerate_label_distribution;
use biaslab::theory::{
    embmlp_flow_prediction, ideal_cliff_construction, is_cliff, key_q2_closed_form,
    label_distribution, rsn_anchor_q2_piecewise, softmax_concentration,
    transformer_flow_prediction, verify_cliff_construction, Role,
};
use biaslab::training::{embedding_gradient, gradient_check, random_samples};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::{CliError, Result};

/// The bundled desk-scale configuration.
pub const DESK_SMALL: &str = include_str!("../../../configs/desk_small.json");

pub fn desk_small() -> ExperimentConfig {
    ExperimentConfig::from_json(DESK_SMALL).expect("bundled desk_small config is valid")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Oracles,
    Gradients,
    Attention,
    Cliff,
    /// Small-initialization embedding gradients against the flow oracles.
    Flow,
}

impl FromStr for Suite {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oracles" => Ok(Self::Oracles),
            "gradients" => Ok(Self::Gradients),
            "attention" => Ok(Self::Attention),
            "cliff" => Ok(Self::Cliff),
            "flow" => Ok(Self::Flow),
            _ => Err(CliError::Config(format!(
                "suite: {s:?} is not one of oracles, gradients, attention, cliff, flow"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub value: f64,
    /// What `value` was compared against, e.g. `<= 1e-12`.
    pub bound: String,
}

impl Check {
    fn at_most(name: impl Into<String>, value: f64, limit: f64) -> Self {
        Self {
            name: name.into(),
            passed: value <= limit,
            value,
            bound: format!("<= {limit:e}"),
        }
    }

    fn below(name: impl Into<String>, value: f64, limit: f64) -> Self {
        Self {
            name: name.into(),
            passed: value < limit,
            value,
            bound: format!("< {limit}"),
        }
    }

    fn above(name: impl Into<String>, value: f64, limit: f64) -> Self {
        Self {
            name: name.into(),
            passed: value > limit,
            value,
            bound: format!("> {limit}"),
        }
    }

    fn at_least(name: impl Into<String>, value: f64, limit: f64) -> Self {
        Self {
            name: name.into(),
            passed: value >= limit,
            value,
            bound: format!(">= {limit}"),
        }
    }

    fn holds(name: impl Into<String>, ok: bool) -> Self {
        Self {
            name: name.into(),
            passed: ok,
            value: f64::from(u8::from(ok)),
            bound: "== 1".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub suite: Suite,
    pub passed: bool,
    pub checks: Vec<Check>,
    pub secs: f64,
}

impl Report {
    fn new(suite: Suite, checks: Vec<Check>, secs: f64) -> Self {
        Self {
            suite,
            passed: !checks.is_empty() && checks.iter().all(|c| c.passed),
            checks,
            secs,
        }
    }

    pub fn failures(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }
}

/// Sizes for the attention suite.
#[derive(Clone, Copy, Debug)]
pub struct AttentionBudget {
    pub inits: usize,
    pub sequences_per_init: usize,
}

impl Default for AttentionBudget {
    fn default() -> Self {
        Self {
            inits: 1000,
            sequences_per_init: 4,
        }
    }
}

pub fn run(suite: Suite) -> Result<Report> {
    let start = std::time::Instant::now();
    let checks = match suite {
        Suite::Oracles => oracle_checks()?,
        Suite::Gradients => gradient_checks()?,
        Suite::Attention => attention_checks(&desk_small(), AttentionBudget::default())?,
        Suite::Cliff => cliff_checks()?,
        Suite::Flow => flow_checks()?,
    };
    Ok(Report::new(suite, checks, start.elapsed().as_secs_f64()))
}

pub fn run_attention(cfg: &ExperimentConfig, budget: AttentionBudget) -> Result<Report> {
    let start = std::time::Instant::now();
    let checks = attention_checks(cfg, budget)?;
    Ok(Report::new(
        Suite::Attention,
        checks,
        start.elapsed().as_secs_f64(),
    ))
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Reduced ranges small enough to enumerate every sequence.
fn reduced(q: usize, seq_len: usize, mode: MemLabelMode) -> TaskSpec {
    TaskSpec {
        key_range: TokenRange::new(8, 10),
        mem_anchor_range: TokenRange::new(1, 2),
        rsn_anchor_range: TokenRange::new(3, 4),
        q,
        seq_len,
        masked_combos: vec![],
        vocab_size: 24,
        mem_label_mode: mode,
        seed: 3,
    }
}

fn role_tokens(spec: &TaskSpec, role: Role) -> Vec<Token> {
    match role {
        Role::MemAnchor => spec.mem_anchor_range.iter().collect(),
        Role::RsnAnchor => spec.rsn_anchor_range.iter().collect(),
        Role::Key | Role::KeyWithNoise => spec.key_range.iter().collect(),
    }
}

/// Every closed-form label law against exhaustive enumeration.
pub fn oracle_checks() -> Result<Vec<Check>> {
    let modes = [
        MemLabelMode::UniformOverKeys,
        MemLabelMode::AnchorDependentWindow,
        MemLabelMode::GroupedRanges(vec![TokenRange::new(5, 7), TokenRange::new(12, 20)]),
    ];
    let mut checks = Vec::new();
    for q in 1..=3 {
        for noise in [0, 1] {
            for mode in &modes {
                let spec = reduced(q, q + 1 + noise, mode.clone());
                for role in [
                    Role::MemAnchor,
                    Role::RsnAnchor,
                    Role::Key,
                    Role::KeyWithNoise,
                ] {
                    let mut worst = 0.0f64;
                    for s in role_tokens(&spec, role) {
                        let closed = label_distribution(&spec, s, role)?;
                        let brute = enumerate_label_distribution(&spec, s, role)?;
                        worst = worst.max(max_abs_diff(&closed.probs, &brute));
                    }
                    let mode_name = match mode {
                        MemLabelMode::UniformOverKeys => "uniform",
                        MemLabelMode::AnchorDependentWindow => "window",
                        MemLabelMode::GroupedRanges(_) => "grouped",
                    };
                    checks.push(Check::at_most(
                        format!("general q={q} L={} {mode_name} {role:?}", spec.seq_len),
                        worst,
                        1e-12,
                    ));
                }
            }
        }
    }
    // The q = 2 special forms, on a range wide enough for the flat part.
    let mut wide = reduced(2, 3, MemLabelMode::UniformOverKeys);
    wide.key_range = TokenRange::new(8, 12);
    wide.vocab_size = 30;
    let mut piece = 0.0f64;
    for s in wide.rsn_anchor_range.iter() {
        let brute = enumerate_label_distribution(&wide, s, Role::RsnAnchor)?;
        piece = piece.max(max_abs_diff(&rsn_anchor_q2_piecewise(&wide, s)?, &brute));
    }
    checks.push(Check::at_most(
        "q=2 reasoning-anchor piecewise",
        piece,
        1e-12,
    ));
    let mut key = 0.0f64;
    for s in wide.key_range.iter() {
        let brute = enumerate_label_distribution(&wide, s, Role::Key)?;
        key = key.max(max_abs_diff(&key_q2_closed_form(&wide, s)?, &brute));
    }
    checks.push(Check::at_most("q=2 key closed form", key, 1e-12));
    Ok(checks)
}

fn small_model(family: ModelFamily) -> ModelConfig {
    ModelConfig {
        family,
        d_vob: 8,
        d_m: 8,
        d_f: 6,
        d_k: 4,
        n_layers: if family == ModelFamily::DecoderTransformer {
            2
        } else {
            1
        },
        n_heads: 1,
        gamma: 0.3,
        use_layer_norm: true,
        activation: ActivationSpec::tanh(),
        max_seq_len: 5,
        ln_eps: 1e-5,
        seed: 7,
    }
}

/// Autodiff against central differences on every family at `d_m = 8`.
pub fn gradient_checks() -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    for family in [
        ModelFamily::EmbMlp,
        ModelFamily::OneLayerTheory,
        ModelFamily::DecoderTransformer,
    ] {
        let m = ModelCheckpoint::init(&small_model(family))?;
        let seq = if family == ModelFamily::EmbMlp { 3 } else { 5 };
        let data = random_samples(8, m.config.n_outputs(), seq, 6, 1);
        let report = gradient_check(&m, &data, 1e-5)?;
        for p in &report.params {
            checks.push(Check::at_most(
                format!("{} {}", family.name(), p.name),
                p.rel_error,
                1e-5,
            ));
        }
    }
    Ok(checks)
}

fn sequences(cfg: &ExperimentConfig, n: usize) -> Result<Vec<Sample>> {
    let combos = cfg.task.n_combos();
    let (data, _) = generate_dataset(&cfg.task, (n * 4).max(combos))?;
    Ok(data.all().take(n).cloned().collect())
}

/// Per-init attention errors at scale `gamma`: fraction of entries off the
/// uniform average by more than 0.05, and the median relative error.
fn attention_at(
    cfg: &ExperimentConfig,
    gamma: f64,
    inits: usize,
    samples: &[Sample],
) -> Result<Vec<(f64, usize, f64)>> {
    (0..inits)
        .into_par_iter()
        .map(|i| {
            let mut mc = cfg.model.clone();
            mc.gamma = gamma;
            mc.seed = cfg.model.seed.wrapping_add(i as u64);
            let m = ModelCheckpoint::init(&mc)?;
            let e = attention_average_error(&m, samples)?;
            Ok((
                e.frac_abs_error_above_005,
                e.n_entries,
                e.median_relative_error,
            ))
        })
        .collect()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    quantile(&v, 0.5).unwrap_or(f64::NAN)
}

/// Fresh-initialization first-layer attention against the uniform causal
/// average: tight at large scale, and far looser at small `gamma`.
pub fn attention_checks(cfg: &ExperimentConfig, budget: AttentionBudget) -> Result<Vec<Check>> {
    let samples = sequences(cfg, budget.sequences_per_init)?;
    let big = attention_at(cfg, 2.0, budget.inits, &samples)?;
    let total: usize = big.iter().map(|r| r.1).sum();
    let off: f64 = big.iter().map(|r| r.0 * r.1 as f64).sum();
    let frac = off / total.max(1) as f64;
    let med = |g: f64| -> Result<f64> {
        Ok(median(
            attention_at(cfg, g, budget.inits, &samples)?
                .into_iter()
                .map(|r| r.2)
                .collect(),
        ))
    };
    let (m03, m08) = (med(0.3)?, med(0.8)?);
    Ok(vec![
        Check::below("gamma=2.0 fraction |A - 1/j| > 0.05", frac, 0.05),
        Check::at_least(
            "median relative error ratio gamma=0.3 / gamma=0.8",
            m03 / m08,
            5.0,
        ),
    ])
}

/// Reference cliff, concentration on a grid of scales and the idealized
/// construction with and without suppression.
pub fn cliff_checks() -> Result<Vec<Check>> {
    const REF: [f64; 8] = [0.0, 1.0, 2.0, 3.0, 2.6, 2.8, -0.5, -1.0];
    let mut checks = vec![
        Check::holds("reference cliff accepted", is_cliff(&REF, 4, 2).is_cliff),
        Check::holds(
            "plateau dip rejected",
            !is_cliff(&[0.0, 1.0, 2.0, 3.0, 1.0, 2.8, -0.5, -1.0], 4, 2).is_cliff,
        ),
        Check::holds(
            "non-increasing prefix rejected",
            !is_cliff(&[0.0, 2.0, 1.0, 3.0, 2.6, 2.8, -0.5, -1.0], 4, 2).is_cliff,
        ),
        Check::holds(
            "tail above first rejected",
            !is_cliff(&[0.0, 1.0, 2.0, 3.0, 2.6, 2.8, 0.5, -1.0], 4, 2).is_cliff,
        ),
        Check::holds("out-of-bounds key rejected", !is_cliff(&REF, 7, 2).is_cliff),
    ];
    let grid = [0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 50.0, 64.0, 128.0];
    let masses = grid
        .iter()
        .map(|&c| Ok(softmax_concentration(&REF, 4, 2, c)?.total_outside))
        .collect::<Result<Vec<f64>>>()?;
    let worst_rise = masses
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(f64::NEG_INFINITY, f64::max);
    checks.push(Check::at_most(
        "outside mass rise along the scale grid",
        worst_rise,
        0.0,
    ));
    checks.push(Check::below(
        "outside mass at scale 50",
        softmax_concentration(&REF, 4, 2, 50.0)?.total_outside,
        1e-3,
    ));

    let spec = TaskSpec {
        key_range: TokenRange::new(21, 120),
        mem_anchor_range: TokenRange::new(1, 10),
        rsn_anchor_range: TokenRange::new(11, 20),
        q: 2,
        seq_len: 9,
        masked_combos: vec![vec![11, 13], vec![13, 11]],
        vocab_size: 200,
        mem_label_mode: MemLabelMode::UniformOverKeys,
        seed: 1,
    };
    for p in 1..=spec.seq_len - spec.q {
        let mut toks: Vec<Token> = (0..spec.seq_len).map(|i| 30 + i as Token).collect();
        toks[p - 1] = 57;
        toks[p] = 12;
        toks[p + 1] = 17;
        let c = ideal_cliff_construction(&spec, &toks, p)?;
        let rep = verify_cliff_construction(&c, &spec, &toks, p)?;
        checks.push(Check::holds(
            format!("construction passes at key position {p}"),
            rep.passes(),
        ));
        let mut off = c;
        off.mu = 0.0;
        let rep0 = verify_cliff_construction(&off, &spec, &toks, p)?;
        checks.push(Check::holds(
            format!("construction fails without suppression at {p}"),
            !rep0.passes(),
        ));
    }
    Ok(checks)
}

/// Task whose balanced enumeration feeds the flow checks; vocabulary equals
/// the model width so the one-layer oracle applies.
pub fn flow_task() -> TaskSpec {
    TaskSpec {
        key_range: TokenRange::new(21, 40),
        mem_anchor_range: TokenRange::new(1, 10),
        rsn_anchor_range: TokenRange::new(11, 20),
        q: 2,
        seq_len: 3,
        masked_combos: vec![],
        vocab_size: 81,
        mem_label_mode: MemLabelMode::UniformOverKeys,
        seed: 0,
    }
}

/// At `gamma = 2`, the exact full-data gradient of every anchor embedding
/// against the Emb-MLP and one-layer flow directions (cosine > 0.99), and
/// memory-anchor gradients against each other (cosine > 0.999).
pub fn flow_checks() -> Result<Vec<Check>> {
    let spec = flow_task();
    let data = balanced_enumeration(&spec)?;
    let mut checks = Vec::new();
    for family in [ModelFamily::EmbMlp, ModelFamily::OneLayerTheory] {
        let m = ModelCheckpoint::init(&ModelConfig {
            family,
            d_vob: 81,
            d_m: 81,
            d_f: 64,
            d_k: 16,
            n_layers: 1,
            n_heads: 1,
            gamma: 2.0,
            use_layer_norm: false,
            activation: ActivationSpec::tanh(),
            max_seq_len: 3,
            ln_eps: 1e-5,
            seed: 5,
        })?;
        let grad = embedding_gradient(&m, &data)?;
        let predict = |s: Token, role: Role| -> Result<Vec<f64>> {
            Ok(match family {
                ModelFamily::EmbMlp => {
                    embmlp_flow_prediction(&spec, s, role, m.param("w1")?, m.param("w2")?)?
                }
                _ => {
                    let wf = m
                        .param("wf1")?
                        .matmul(m.param("wf2")?)
                        .map_err(biaslab::models::ModelError::from)?;
                    let wvo = m
                        .param("wv")?
                        .matmul(m.param("wo")?)
                        .map_err(biaslab::models::ModelError::from)?;
                    transformer_flow_prediction(&spec, s, role, &wf, &wvo)?
                }
            })
        };
        let mut worst = f64::INFINITY;
        let anchors = spec
            .mem_anchor_range
            .iter()
            .map(|s| (s, Role::MemAnchor))
            .chain(spec.rsn_anchor_range.iter().map(|s| (s, Role::RsnAnchor)));
        for (s, role) in anchors {
            let flow: Vec<f64> = grad.row(s as usize).iter().map(|g| -g).collect();
            worst = worst.min(cosine(&flow, &predict(s, role)?).unwrap_or(f64::NEG_INFINITY));
        }
        let mem: Vec<Vec<f64>> = spec
            .mem_anchor_range
            .iter()
            .map(|s| grad.row(s as usize).to_vec())
            .collect();
        let mut pair = f64::INFINITY;
        for i in 0..mem.len() {
            for j in i + 1..mem.len() {
                pair = pair.min(cosine(&mem[i], &mem[j]).unwrap_or(f64::NEG_INFINITY));
            }
        }
        checks.push(Check::above(
            format!("{} anchor flow cosine (min)", family.name()),
            worst,
            0.99,
        ));
        checks.push(Check::above(
            format!("{} memory-anchor pairwise cosine (min)", family.name()),
            pair,
            0.999,
        ));
    }
    Ok(checks)
}
