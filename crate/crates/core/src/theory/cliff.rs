//! Cliff sequences and the two-layer attention construction that produces
//! them.
//!
//! A score vector `l` (1-based) is a `(p, q)`-cliff when it rises strictly
//! up to `p`, stays on the plateau `(l[p-1] + l[p]) / 2 <= l[p+k] <= l[p]` for
//! `k = 1..=q`, and every later entry falls below `l[1]`. For `p = 1` there is
//! no `l[0]` and the plateau has no lower bound.
//!
//! The construction: first-layer attention is the running average, the value
//! map is `lambda_v w_hat^T v` with `w_hat` the normalized sum of reasoning
//! anchor embeddings, and the second layer scores with
//! `A = proj(span pos) - mu v^T v`. The last row of `X2 A X2^T` is checked for
//! the cliff shape.
//!
//! One `(lambda_v, mu, v)` cannot serve every key position at once: with the
//! suppression large enough to push the tail below `l[1]`, the plateau windows
//! for neighbouring `p` demand incompatible offsets on the last anchor.
//! [`ideal_cliff_construction`] therefore solves the parameters for the given
//! sequence.

use serde::{Deserialize, Serialize};

use super::{Result, TheoryError};
use crate::tasks::{TaskSpec, Token};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "condition", content = "at")]
pub enum CliffCondition {
    /// `p` or `p + q` outside `1..=L`.
    Bounds,
    Increasing(usize),
    Plateau(usize),
    Descending(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CliffVerdict {
    pub is_cliff: bool,
    /// First violated condition, with its 1-based position.
    pub violated: Option<CliffCondition>,
}

impl CliffVerdict {
    fn fail(c: CliffCondition) -> Self {
        Self {
            is_cliff: false,
            violated: Some(c),
        }
    }
}

/// Checks the three cliff conditions in order and reports the first
/// violation. `p` is 1-based.
pub fn is_cliff(values: &[f64], p: usize, q: usize) -> CliffVerdict {
    let l = values.len();
    if p < 1 || p + q > l {
        return CliffVerdict::fail(CliffCondition::Bounds);
    }
    let at = |i: usize| values[i - 1];
    for i in 1..p {
        if at(i + 1) <= at(i) {
            return CliffVerdict::fail(CliffCondition::Increasing(i + 1));
        }
    }
    let floor = if p > 1 {
        0.5 * (at(p - 1) + at(p))
    } else {
        f64::NEG_INFINITY
    };
    for i in p + 1..=p + q {
        if at(i) < floor || at(i) > at(p) {
            return CliffVerdict::fail(CliffCondition::Plateau(i));
        }
    }
    for i in p + q + 1..=l {
        if at(i) >= at(1) {
            return CliffVerdict::fail(CliffCondition::Descending(i));
        }
    }
    CliffVerdict {
        is_cliff: true,
        violated: None,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Concentration {
    /// Largest single softmax weight outside positions `p..=p+q`.
    pub max_outside: f64,
    /// Summed softmax weight outside positions `p..=p+q`.
    pub total_outside: f64,
}

/// Softmax of `scale * l / |l|` restricted to the positions off the key and
/// anchor block.
pub fn softmax_concentration(
    values: &[f64],
    p: usize,
    q: usize,
    scale: f64,
) -> Result<Concentration> {
    let v = is_cliff(values, p, q);
    if !v.is_cliff {
        return Err(TheoryError::NotACliff(format!(
            "not a ({p},{q})-cliff: {:?}",
            v.violated
        )));
    }
    let norm = values.iter().map(|x| x * x).sum::<f64>().sqrt();
    let k = if norm > 0.0 { scale / norm } else { 0.0 };
    let top = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = values.iter().map(|x| (k * (x - top)).exp()).collect();
    let z: f64 = e.iter().sum();
    let outside = e
        .iter()
        .enumerate()
        .filter(|(i, _)| !(p..=p + q).contains(&(i + 1)))
        .map(|(_, w)| w / z);
    let (mut max_outside, mut total_outside) = (0.0f64, 0.0);
    for w in outside {
        max_outside = max_outside.max(w);
        total_outside += w;
    }
    Ok(Concentration {
        max_outside,
        total_outside,
    })
}

/// Inputs of the construction. `embeddings` is `d_vob x d`; `positions`,
/// when given, is `L x d`. Without positions, two extra coordinates carrying
/// `(cos(i pi / L), sin(i pi / L))` are appended to every vector.
#[derive(Clone, Debug)]
pub struct CliffConstruction {
    pub embeddings: Tensor,
    pub positions: Option<Tensor>,
    pub lambda_v: f64,
    pub mu: f64,
    pub v: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Assumption {
    /// Reasoning anchors orthogonal to memory anchors and to keys.
    AnchorOrthogonality,
    /// For each key, similarity to other keys never increases with distance.
    KeySimilarityOrder,
    /// All embedding entries finite.
    BoundedEmbeddings,
    /// Position vectors orthogonal to every task token's embedding.
    PositionOrthogonality,
    /// Unit position vectors with `cos(pos_i, pos_j) = cos(|i - j| pi / L)`.
    PositionCosineLaw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssumptionCheck {
    pub assumption: Assumption,
    pub holds: bool,
    pub detail: String,
}

/// The three parameter inequalities, evaluated for the given sequence. These
/// are sufficient-style bounds from a hand derivation and are reported next
/// to the direct verdict, not used to produce it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstructionConditions {
    /// `lambda_v / |sum of reasoning anchor embeddings|`.
    pub lambda_tilde: f64,
    /// Inner product of the anchor block sum with the anchor-set sum.
    pub block_alignment: f64,
    /// `|w_a| cos(v, w_a) / lambda_tilde` per anchor in the block.
    pub anchor_alignment: Vec<f64>,
    pub upper_bound: f64,
    pub lower_bound: f64,
    pub suppression_bound: f64,
    pub anchors_below_upper: bool,
    pub anchors_above_lower: bool,
    pub suppression_sufficient: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CliffReport {
    pub p: usize,
    pub q: usize,
    pub assumptions: Vec<AssumptionCheck>,
    pub conditions: ConstructionConditions,
    /// Last-row second-layer scores; absent when an assumption fails.
    pub scores: Option<Vec<f64>>,
    pub verdict: Option<CliffVerdict>,
}

impl CliffReport {
    pub fn assumptions_hold(&self) -> bool {
        self.assumptions.iter().all(|a| a.holds)
    }

    pub fn passes(&self) -> bool {
        self.verdict.is_some_and(|v| v.is_cliff)
    }
}

const TOL: f64 = 1e-9;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let n = norm(a) * norm(b);
    if n == 0.0 {
        0.0
    } else {
        dot(a, b) / n
    }
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Embeddings, positions and `v` in a common width.
struct Frame {
    emb: Vec<Vec<f64>>,
    pos: Vec<Vec<f64>>,
    v: Vec<f64>,
}

fn frame(c: &CliffConstruction, seq_len: usize) -> Result<Frame> {
    let d = c.embeddings.cols();
    if c.v.len() != d {
        return Err(TheoryError::Dimension(format!(
            "v has length {}, embeddings width {d}",
            c.v.len()
        )));
    }
    let rows = |t: &Tensor| (0..t.rows()).map(|r| t.row(r).to_vec()).collect::<Vec<_>>();
    match &c.positions {
        Some(p) => {
            if p.shape() != (seq_len, d) {
                return Err(TheoryError::Dimension(format!(
                    "positions {:?}, expected {seq_len}x{d}",
                    p.shape()
                )));
            }
            Ok(Frame {
                emb: rows(&c.embeddings),
                pos: rows(p),
                v: c.v.clone(),
            })
        }
        None => {
            let pad = |mut x: Vec<f64>| {
                x.extend([0.0, 0.0]);
                x
            };
            let pos = (1..=seq_len)
                .map(|i| {
                    let th = i as f64 * std::f64::consts::PI / seq_len as f64;
                    let mut x = vec![0.0; d];
                    x.extend([th.cos(), th.sin()]);
                    x
                })
                .collect();
            Ok(Frame {
                emb: rows(&c.embeddings).into_iter().map(pad).collect(),
                pos,
                v: pad(c.v.clone()),
            })
        }
    }
}

fn check_assumptions(spec: &TaskSpec, f: &Frame) -> Vec<AssumptionCheck> {
    let emb = |t: Token| &f.emb[t as usize];
    let mut out = Vec::new();

    let mut worst = (0.0f64, String::new());
    for r in spec.rsn_anchor_range.iter() {
        for o in spec.mem_anchor_range.iter().chain(spec.key_range.iter()) {
            let c = cosine(emb(r), emb(o)).abs();
            if c > worst.0 {
                worst = (c, format!("|cos({r}, {o})| = {c:.3e}"));
            }
        }
    }
    out.push(AssumptionCheck {
        assumption: Assumption::AnchorOrthogonality,
        holds: worst.0 <= TOL,
        detail: worst.1,
    });

    let keys: Vec<Token> = spec.key_range.iter().collect();
    let mut order = (true, String::new());
    'outer: for &a in &keys {
        // Along each side of `a`, similarity must not rise with distance, and
        // equal distances on both sides must tie.
        let cos_at = |d: i64| -> Option<f64> {
            let t = i64::from(a) + d;
            (t >= i64::from(spec.key_range.lo) && t <= i64::from(spec.key_range.hi))
                .then(|| cosine(emb(a), emb(t as Token)))
        };
        let span = keys.len() as i64;
        let mut prev = f64::INFINITY;
        for d in 0..span {
            let here: Vec<f64> = [cos_at(d), cos_at(-d)].into_iter().flatten().collect();
            if here.is_empty() {
                continue;
            }
            let (lo, hi) = here
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &x| {
                    (l.min(x), h.max(x))
                });
            if hi > prev + TOL || hi - lo > TOL {
                order = (
                    false,
                    format!("key {a}: similarity rises or splits at distance {d}"),
                );
                break 'outer;
            }
            prev = lo;
        }
    }
    out.push(AssumptionCheck {
        assumption: Assumption::KeySimilarityOrder,
        holds: order.0,
        detail: order.1,
    });

    let finite = f.emb.iter().flatten().all(|x| x.is_finite());
    out.push(AssumptionCheck {
        assumption: Assumption::BoundedEmbeddings,
        holds: finite,
        detail: if finite {
            String::new()
        } else {
            "non-finite entry".into()
        },
    });

    let mut worst = (0.0f64, String::new());
    let task_tokens = spec
        .key_range
        .iter()
        .chain(spec.mem_anchor_range.iter())
        .chain(spec.rsn_anchor_range.iter());
    for t in task_tokens {
        for (i, p) in f.pos.iter().enumerate() {
            let c = cosine(emb(t), p).abs();
            if c > worst.0 {
                worst = (c, format!("|cos(token {t}, position {})| = {c:.3e}", i + 1));
            }
        }
    }
    out.push(AssumptionCheck {
        assumption: Assumption::PositionOrthogonality,
        holds: worst.0 <= TOL,
        detail: worst.1,
    });

    let l = f.pos.len();
    let mut worst = (0.0f64, String::new());
    for (i, a) in f.pos.iter().enumerate() {
        let e = (norm(a) - 1.0).abs();
        if e > worst.0 {
            worst = (e, format!("|pos {}| off by {e:.3e}", i + 1));
        }
        for (j, b) in f.pos.iter().enumerate() {
            let want = (i.abs_diff(j) as f64 * std::f64::consts::PI / l as f64).cos();
            let e = (cosine(a, b) - want).abs();
            if e > worst.0 {
                worst = (
                    e,
                    format!("cos(pos {}, pos {}) off by {e:.3e}", i + 1, j + 1),
                );
            }
        }
    }
    out.push(AssumptionCheck {
        assumption: Assumption::PositionCosineLaw,
        holds: worst.0 <= 1e-6,
        detail: worst.1,
    });
    out
}

fn check_sequence(spec: &TaskSpec, tokens: &[Token], p: usize, vocab: usize) -> Result<()> {
    let (l, q) = (spec.seq_len, spec.q);
    if tokens.len() != l {
        return Err(TheoryError::Sequence(format!(
            "{} tokens, expected {l}",
            tokens.len()
        )));
    }
    if p < 1 || p + q > l {
        return Err(TheoryError::Sequence(format!(
            "key position {p} out of 1..={}",
            l - q
        )));
    }
    for (i, &t) in tokens.iter().enumerate() {
        let ok = if i >= p && i < p + q {
            spec.rsn_anchor_range.contains(t)
        } else {
            spec.key_range.contains(t)
        };
        if !ok || t as usize >= vocab {
            return Err(TheoryError::Sequence(format!(
                "token {t} does not fit position {}",
                i + 1
            )));
        }
    }
    Ok(())
}

fn anchor_sum(spec: &TaskSpec, f: &Frame) -> Vec<f64> {
    let mut w = vec![0.0; f.v.len()];
    for a in spec.rsn_anchor_range.iter() {
        axpy(&mut w, 1.0, &f.emb[a as usize]);
    }
    w
}

fn conditions(
    spec: &TaskSpec,
    c: &CliffConstruction,
    f: &Frame,
    tokens: &[Token],
    p: usize,
) -> ConstructionConditions {
    use std::f64::consts::PI;
    let (l, q) = (spec.seq_len as f64, spec.q);
    let wbar = anchor_sum(spec, f);
    let lambda_tilde = c.lambda_v / norm(&wbar);
    let mut block = vec![0.0; wbar.len()];
    for &a in &tokens[p..p + q] {
        axpy(&mut block, 1.0, &f.emb[a as usize]);
    }
    let phi = dot(&block, &wbar);
    let anchor_alignment: Vec<f64> = tokens[p..p + q]
        .iter()
        .map(|&a| {
            let w = &f.emb[a as usize];
            norm(w) * cosine(&f.v, w) / lambda_tilde
        })
        .collect();
    let s = (PI / l).sin();
    let cs = (PI / l).cos();
    let c_upper = ((0.5 * (1.0 - cs)).powi(2) + (1.5 * s).powi(2)).sqrt()
        * ((l - 1.0) / l * PI - (3.0 * s / (1.0 - cs)).atan()).cos();
    let c_lower =
        2.0 * ((2 * p + q) as f64 * PI / (2.0 * l)).sin() * (q as f64 * PI / (2.0 * l)).sin();
    let strength = lambda_tilde * lambda_tilde * c.mu;
    let upper_bound = l * c_upper / (strength * phi) - phi / l;
    let lower_bound = l * c_lower / (strength * phi) - phi / l;
    let suppression_bound = l * l * (1.0 + cs) / (phi * phi);
    ConstructionConditions {
        lambda_tilde,
        block_alignment: phi,
        anchors_below_upper: anchor_alignment.iter().all(|&x| x <= upper_bound),
        anchors_above_lower: anchor_alignment.iter().all(|&x| x >= lower_bound),
        suppression_sufficient: strength > suppression_bound,
        anchor_alignment,
        upper_bound,
        lower_bound,
        suppression_bound,
    }
}

/// Orthonormal basis of the span of `rows` (modified Gram-Schmidt).
fn orthonormal_basis(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for r in rows {
        let mut x = r.clone();
        for b in &basis {
            let c = dot(&x, b);
            axpy(&mut x, -c, b);
        }
        let n = norm(&x);
        if n > 1e-10 * norm(r).max(1.0) {
            basis.push(x.into_iter().map(|y| y / n).collect());
        }
    }
    basis
}

/// Builds the construction for `tokens` with the key at 1-based position
/// `p` and reports the assumptions, the parameter inequalities and the cliff
/// verdict of the last-row scores. The verdict is skipped when an assumption
/// fails.
pub fn verify_cliff_construction(
    c: &CliffConstruction,
    spec: &TaskSpec,
    tokens: &[Token],
    p: usize,
) -> Result<CliffReport> {
    spec.validate()?;
    check_sequence(spec, tokens, p, c.embeddings.rows())?;
    let f = frame(c, spec.seq_len)?;
    let assumptions = check_assumptions(spec, &f);
    let conditions = conditions(spec, c, &f, tokens, p);
    let (scores, verdict) = if assumptions.iter().all(|a| a.holds) {
        let s = last_row_scores(spec, c, &f, tokens)?;
        let v = is_cliff(&s, p, spec.q);
        (Some(s), Some(v))
    } else {
        (None, None)
    };
    Ok(CliffReport {
        p,
        q: spec.q,
        assumptions,
        conditions,
        scores,
        verdict,
    })
}

fn last_row_scores(
    spec: &TaskSpec,
    c: &CliffConstruction,
    f: &Frame,
    tokens: &[Token],
) -> Result<Vec<f64>> {
    let wbar = anchor_sum(spec, f);
    let n = norm(&wbar);
    if n == 0.0 {
        return Err(TheoryError::Unsupported(
            "reasoning anchor embeddings sum to zero".into(),
        ));
    }
    let what: Vec<f64> = wbar.iter().map(|x| x / n).collect();
    let d = f.v.len();
    let x1: Vec<Vec<f64>> = tokens
        .iter()
        .zip(&f.pos)
        .map(|(&t, p)| {
            f.emb[t as usize]
                .iter()
                .zip(p)
                .map(|(a, b)| a + b)
                .collect()
        })
        .collect();
    let mut running = vec![0.0; d];
    let x2: Vec<Vec<f64>> = x1
        .iter()
        .enumerate()
        .map(|(j, x)| {
            axpy(&mut running, 1.0, x);
            let avg_proj = dot(&running, &what) / (j + 1) as f64;
            let mut y = x.clone();
            axpy(&mut y, c.lambda_v * avg_proj, &f.v);
            y
        })
        .collect();
    let basis = orthonormal_basis(&f.pos);
    let last = x2.last().expect("non-empty sequence");
    let last_pos: Vec<f64> = basis.iter().map(|b| dot(last, b)).collect();
    let last_v = dot(last, &f.v);
    Ok(x2
        .iter()
        .map(|x| {
            let pos_part: f64 = basis
                .iter()
                .zip(&last_pos)
                .map(|(b, lp)| lp * dot(x, b))
                .sum();
            pos_part - c.mu * last_v * dot(x, &f.v)
        })
        .collect())
}

/// Idealized embeddings for `spec` plus `(lambda_v, mu, v)` solved so that
/// `tokens` (key at 1-based `p`, distinct reasoning anchors after it) gives
/// a cliff.
///
/// Layout of the embedding space: two coordinates for keys placed on a
/// quarter arc (similarity falls with distance), one coordinate per memory
/// anchor, one per reasoning anchor, and one spare coordinate that absorbs
/// the rest of the unit vector `v`. Positions are left to
/// [`verify_cliff_construction`].
pub fn ideal_cliff_construction(
    spec: &TaskSpec,
    tokens: &[Token],
    p: usize,
) -> Result<CliffConstruction> {
    use std::f64::consts::PI;
    spec.validate()?;
    check_sequence(spec, tokens, p, spec.vocab_size)?;
    let (l, q) = (spec.seq_len, spec.q);
    let block = &tokens[p..p + q];
    let mut seen = block.to_vec();
    seen.sort_unstable();
    seen.dedup();
    if seen.len() != q {
        return Err(TheoryError::Unsupported(
            "construction needs distinct anchors in the block".into(),
        ));
    }

    let (n_mem, n_rsn, n_key) = (
        spec.mem_anchor_range.len(),
        spec.rsn_anchor_range.len(),
        spec.key_range.len(),
    );
    let mem_at = 2;
    let rsn_at = mem_at + n_mem;
    let spare = rsn_at + n_rsn;
    let d = spare + 1;
    let mut emb = Tensor::zeros(spec.vocab_size, d);
    for z in spec.key_range.iter() {
        let th = f64::from(z - spec.key_range.lo) / n_key as f64 * PI / 2.0;
        emb.set(z as usize, 0, th.cos());
        emb.set(z as usize, 1, th.sin());
    }
    for (i, a) in spec.mem_anchor_range.iter().enumerate() {
        emb.set(a as usize, mem_at + i, 1.0);
    }
    for (i, a) in spec.rsn_anchor_range.iter().enumerate() {
        emb.set(a as usize, rsn_at + i, 1.0);
    }

    // Scores without suppression are -cos(j pi / L). Suppression at position
    // j is mu T (x2_j . v) with T = x2_L . v.
    let base = |j: usize| -(j as f64 * PI / l as f64).cos();
    let floor = if p > 1 {
        0.5 * (base(p - 1) + base(p))
    } else {
        base(1) - 0.2
    };
    let target: Vec<f64> = (1..=q)
        .map(|k| {
            let j = p + k;
            0.5 * ((base(j) - base(p)) + (base(j) - floor))
        })
        .collect();
    let c = 1.0 / (n_rsn as f64).sqrt();
    let (qf, lf) = (q as f64, l as f64);

    let (lambda_v, mu, beta) = if p + q < l {
        // x2_L . v = lambda q c / L. With K = mu T lambda q c the tail is
        // base(j) - K / j and anchor k sits at (K / (lambda q c)) beta_k + K k / (q j).
        let k_tail = (p + q + 1..=l)
            .map(|j| j as f64 * (base(j) - base(1)))
            .fold(0.0f64, f64::max);
        let big_k = 2.0 * k_tail + 1.0;
        let unit: Vec<f64> = (1..=q)
            .map(|k| {
                let j = (p + k) as f64;
                (target[k - 1] - big_k * k as f64 / (qf * j)) * qf * c / big_k
            })
            .collect();
        let n = norm(&unit);
        let lambda = if n > 0.0 { 0.5 / n } else { 1.0 };
        let mu = big_k * lf / (lambda * lambda * qf * qf * c * c);
        (
            lambda,
            mu,
            unit.iter().map(|u| lambda * u).collect::<Vec<_>>(),
        )
    } else {
        // The last anchor is the last token: x2_L . v = beta_q + lambda q c / L.
        let (mut lambda, mut mu) = (1.0, 1.0);
        loop {
            let t = (target[q - 1] / mu).sqrt();
            let mut beta: Vec<f64> = (1..q)
                .map(|k| target[k - 1] / (mu * t) - lambda * k as f64 * c / (p + k) as f64)
                .collect();
            beta.push(t - lambda * qf * c / lf);
            if dot(&beta, &beta) <= 0.5 {
                break (lambda, mu, beta);
            }
            mu *= 2.0;
            lambda *= 0.5;
            if !mu.is_finite() {
                return Err(TheoryError::Unsupported("no construction found".into()));
            }
        }
    };

    let mut v = vec![0.0; d];
    for (&a, b) in block.iter().zip(&beta) {
        v[rsn_at + (a - spec.rsn_anchor_range.lo) as usize] = *b;
    }
    v[spare] = (1.0 - dot(&beta, &beta)).max(0.0).sqrt();
    Ok(CliffConstruction {
        embeddings: emb,
        positions: None,
        lambda_v,
        mu,
        v,
    })
}
