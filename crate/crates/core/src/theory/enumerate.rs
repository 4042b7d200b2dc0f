//! Brute-force label laws over the finite sample space.
//!
//! Walks every (kind, key, anchor tuple, key position, noise tokens, memory
//! label) outcome with its exact probability and weights each by the number
//! of times the token occupies the role's positions. Nothing here shares code
//! with the closed forms beyond the task's own label rules, so the two can
//! check each other.

use rand::Rng;

use super::{Result, Role, TheoryError};
use crate::rng;
use crate::tasks::{TaskSpec, Token};

/// Largest outcome count [`enumerate_label_distribution`] will walk.
pub const MAX_OUTCOMES: u64 = 10_000_000;

fn tuples(lo: Token, hi: Token, q: usize) -> Vec<Vec<Token>> {
    let mut out: Vec<Vec<Token>> = vec![vec![]];
    for _ in 0..q {
        let mut next = Vec::new();
        for t in &out {
            for a in lo..=hi {
                let mut u = t.clone();
                u.push(a);
                next.push(u);
            }
        }
        out = next;
    }
    out
}

fn occurrences(spec: &TaskSpec, tokens: &[Token], p: usize, s: Token, role: Role) -> usize {
    let q = spec.q;
    tokens
        .iter()
        .enumerate()
        .filter(|&(i, &t)| {
            t == s
                && match role {
                    Role::MemAnchor | Role::RsnAnchor => i >= p && i < p + q,
                    Role::Key => i + 1 == p,
                    Role::KeyWithNoise => !(i >= p && i < p + q),
                }
        })
        .count()
}

/// Outcome count the enumeration would visit.
pub fn outcome_count(spec: &TaskSpec) -> u64 {
    let nz = spec.key_range.len() as u64;
    let positions = (spec.seq_len - spec.q) as u64;
    let noise = nz.saturating_pow((spec.seq_len - spec.q - 1) as u32);
    let tuples = (spec.mem_anchor_range.len() as u64).pow(spec.q as u32)
        + (spec.rsn_anchor_range.len() as u64).pow(spec.q as u32);
    nz.saturating_mul(positions)
        .saturating_mul(noise)
        .saturating_mul(tuples)
}

pub fn enumerate_label_distribution(spec: &TaskSpec, s: Token, role: Role) -> Result<Vec<f64>> {
    spec.validate()?;
    role.check(spec, s)?;
    let n = outcome_count(spec);
    if n > MAX_OUTCOMES {
        return Err(TheoryError::Unsupported(format!(
            "{n} outcomes exceed the enumeration budget"
        )));
    }
    let (q, l) = (spec.q, spec.seq_len);
    let keys: Vec<Token> = spec.key_range.iter().collect();
    let n_noise = l - q - 1;
    let noise_fills = tuples(spec.key_range.lo, spec.key_range.hi, n_noise);
    let mut mass = vec![0.0; spec.vocab_size];
    let mut total = 0.0;
    for (is_memory, range) in [
        (true, spec.mem_anchor_range),
        (false, spec.rsn_anchor_range),
    ] {
        let combos = tuples(range.lo, range.hi, q);
        let w_combo = 0.5 / combos.len() as f64;
        let w_key = 1.0 / keys.len() as f64;
        let w_pos = 1.0 / (l - q) as f64;
        let w_noise = 1.0 / noise_fills.len() as f64;
        for anchors in &combos {
            for &z in &keys {
                // Label outcomes and their probabilities for this tuple.
                let labels: Vec<(usize, f64)> = if is_memory {
                    let r = spec.memory_label_range(z, anchors);
                    r.iter()
                        .map(|t| (t as usize, 1.0 / r.len() as f64))
                        .collect()
                } else {
                    vec![(spec.reasoning_label(z, anchors)? as usize, 1.0)]
                };
                for p in 1..=l - q {
                    for fill in &noise_fills {
                        let mut tokens = Vec::with_capacity(l);
                        let mut noise = fill.iter();
                        for i in 0..l {
                            tokens.push(if i + 1 == p {
                                z
                            } else if i >= p && i < p + q {
                                anchors[i - p]
                            } else {
                                *noise.next().expect("noise slots match")
                            });
                        }
                        let c = occurrences(spec, &tokens, p, s, role) as f64;
                        if c == 0.0 {
                            continue;
                        }
                        let w = c * w_combo * w_key * w_pos * w_noise;
                        total += w;
                        for &(label, pl) in &labels {
                            mass[label] += w * pl;
                        }
                    }
                }
            }
        }
    }
    if total == 0.0 {
        return Err(TheoryError::Unsupported(format!(
            "token {s} never occurs as {role:?}"
        )));
    }
    Ok(mass.into_iter().map(|m| m / total).collect())
}

/// Monte Carlo estimate of the same law: sequences are drawn from the
/// generator's distribution, with a fresh memory label per sequence so the
/// estimate targets the law averaged over memory tables. Sequences are drawn
/// until `s` has been seen `n_draws` times in its role; sequences without it
/// are discarded.
pub fn sample_label_distribution(
    spec: &TaskSpec,
    s: Token,
    role: Role,
    n_draws: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    spec.validate()?;
    role.check(spec, s)?;
    let mut rng = rng::stream(seed, rng::MISC_BASE + u64::from(s));
    let (q, l) = (spec.q, spec.seq_len);
    let mut mass = vec![0.0; spec.vocab_size];
    let mut total = 0.0;
    let mut anchors = vec![0; q];
    let mut tokens = vec![0; l];
    // Every token of a role shows up with probability at least 1 / (2 N) per
    // sequence, N the size of its range; give up well past that.
    let widest = [
        2 * spec.mem_anchor_range.len(),
        2 * spec.rsn_anchor_range.len(),
        spec.key_range.len(),
    ]
    .into_iter()
    .max()
    .unwrap_or(1) as u64;
    let budget = 20 * n_draws.max(1) as u64 * widest;
    let mut drawn = 0u64;
    while total < n_draws as f64 {
        drawn += 1;
        if drawn > budget {
            break;
        }
        let is_memory = rng.random_bool(0.5);
        let range = if is_memory {
            spec.mem_anchor_range
        } else {
            spec.rsn_anchor_range
        };
        for a in anchors.iter_mut() {
            *a = rng.random_range(range.lo..=range.hi);
        }
        let z = rng.random_range(spec.key_range.lo..=spec.key_range.hi);
        let p = rng.random_range(1..=l - q);
        for (i, t) in tokens.iter_mut().enumerate() {
            *t = if i + 1 == p {
                z
            } else if i >= p && i < p + q {
                anchors[i - p]
            } else {
                rng.random_range(spec.key_range.lo..=spec.key_range.hi)
            };
        }
        let c = occurrences(spec, &tokens, p, s, role) as f64;
        if c == 0.0 {
            continue;
        }
        let label = if is_memory {
            let r = spec.memory_label_range(z, &anchors);
            rng.random_range(r.lo..=r.hi)
        } else {
            spec.reasoning_label(z, &anchors)?
        };
        mass[label as usize] += c;
        total += c;
    }
    if total == 0.0 {
        return Err(TheoryError::Unsupported(format!(
            "token {s} never sampled as {role:?}"
        )));
    }
    Ok(mass.into_iter().map(|m| m / total).collect())
}
