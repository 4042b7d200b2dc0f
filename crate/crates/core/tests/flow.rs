//! Exact embedding gradients at small initialization against the
//! leading-order flow directions.

use biaslab::linalg::cosine;
use biaslab::models::{ModelCheckpoint, ModelConfig, ModelFamily};
use biaslab::tasks::{MemLabelMode, Sample, SampleKind, TaskSpec, Token, TokenRange};
use biaslab::tensor::ActivationSpec;
use biaslab::theory::{embmlp_flow_prediction, transformer_flow_prediction, Role};
use biaslab::training::embedding_gradient;

fn spec() -> TaskSpec {
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

/// Every `(key, a1, a2)` once per kind. Memory labels follow a Latin square
/// over the keys, so for any anchor in any slot the labels are exactly
/// uniform on the key range and the finite data realizes the label laws.
pub fn enumerated(spec: &TaskSpec) -> Vec<Sample> {
    let keys: Vec<Token> = spec.key_range.iter().collect();
    let nz = keys.len() as Token;
    let mut out = Vec::new();
    for (zi, &z) in keys.iter().enumerate() {
        for a1 in spec.mem_anchor_range.iter() {
            for a2 in spec.mem_anchor_range.iter() {
                let label = spec.key_range.lo + (zi as Token + a1 + a2) % nz;
                out.push(Sample {
                    tokens: vec![z, a1, a2],
                    label,
                    kind: SampleKind::Memory,
                    key_pos: 1,
                });
            }
        }
        for a1 in spec.rsn_anchor_range.iter() {
            for a2 in spec.rsn_anchor_range.iter() {
                out.push(Sample {
                    tokens: vec![z, a1, a2],
                    label: z + a1 + a2,
                    kind: SampleKind::ReasoningTrain,
                    key_pos: 1,
                });
            }
        }
    }
    out
}

fn model(family: ModelFamily) -> ModelCheckpoint {
    ModelCheckpoint::init(&ModelConfig {
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
    })
    .unwrap()
}

fn anchors(spec: &TaskSpec) -> Vec<(Token, Role)> {
    spec.mem_anchor_range
        .iter()
        .map(|s| (s, Role::MemAnchor))
        .chain(spec.rsn_anchor_range.iter().map(|s| (s, Role::RsnAnchor)))
        .collect()
}

/// Minimum cosine between `-grad` and the prediction over all anchors, and
/// the minimum pairwise cosine among memory-anchor gradients.
fn agreement(m: &ModelCheckpoint, predict: impl Fn(Token, Role) -> Vec<f64>) -> (f64, f64) {
    let spec = spec();
    let grad = embedding_gradient(m, &enumerated(&spec)).unwrap();
    let mut worst = f64::INFINITY;
    for (s, role) in anchors(&spec) {
        let flow: Vec<f64> = grad.row(s as usize).iter().map(|g| -g).collect();
        let c = cosine(&flow, &predict(s, role)).unwrap();
        worst = worst.min(c);
    }
    let mem: Vec<Vec<f64>> = spec
        .mem_anchor_range
        .iter()
        .map(|s| grad.row(s as usize).to_vec())
        .collect();
    let mut pair = f64::INFINITY;
    for i in 0..mem.len() {
        for j in i + 1..mem.len() {
            pair = pair.min(cosine(&mem[i], &mem[j]).unwrap());
        }
    }
    eprintln!("min flow cosine {worst:.6}, memory pairwise {pair:.6}");
    (worst, pair)
}

#[test]
fn enumerated_data_realizes_uniform_memory_labels() {
    let spec = spec();
    let data = enumerated(&spec);
    for s in spec.mem_anchor_range.iter() {
        for slot in [1, 2] {
            let mut hist = vec![0usize; spec.vocab_size];
            for d in data
                .iter()
                .filter(|d| d.kind == SampleKind::Memory && d.tokens[slot] == s)
            {
                hist[d.label as usize] += 1;
            }
            let counts: Vec<usize> = spec.key_range.iter().map(|z| hist[z as usize]).collect();
            assert!(counts.iter().all(|&c| c == counts[0]), "s={s} slot {slot}");
            assert_eq!(counts.iter().sum::<usize>(), 200);
        }
    }
}

#[test]
fn emb_mlp_gradients_follow_the_flow_prediction() {
    let m = model(ModelFamily::EmbMlp);
    let spec = spec();
    let (w1, w2) = (
        m.param("w1").unwrap().clone(),
        m.param("w2").unwrap().clone(),
    );
    let (worst, pair) = agreement(&m, |s, role| {
        embmlp_flow_prediction(&spec, s, role, &w1, &w2).unwrap()
    });
    assert!(worst > 0.99, "min cosine {worst}");
    assert!(pair > 0.999, "memory anchors pairwise {pair}");
}

#[test]
fn one_layer_gradients_follow_the_flow_prediction() {
    let m = model(ModelFamily::OneLayerTheory);
    let spec = spec();
    let wf = m
        .param("wf1")
        .unwrap()
        .matmul(m.param("wf2").unwrap())
        .unwrap();
    let wvo = m
        .param("wv")
        .unwrap()
        .matmul(m.param("wo").unwrap())
        .unwrap();
    let (worst, pair) = agreement(&m, |s, role| {
        transformer_flow_prediction(&spec, s, role, &wf, &wvo).unwrap()
    });
    assert!(worst > 0.99, "min cosine {worst}");
    assert!(pair > 0.999, "memory anchors pairwise {pair}");
}

#[test]
fn library_enumeration_matches_the_local_one() {
    let spec = spec();
    let mut ours = enumerated(&spec);
    let mut lib = biaslab::tasks::balanced_enumeration(&spec).unwrap();
    let key = |s: &Sample| (s.kind.code(), s.tokens.clone());
    ours.sort_by_key(key);
    lib.sort_by_key(key);
    assert_eq!(ours, lib);

    let mut noisy = spec.clone();
    noisy.seq_len = 4;
    assert!(biaslab::tasks::balanced_enumeration(&noisy).is_err());
}
