//! Synthetic anchor-function datasets.
//!
//! A sequence of `seq_len` tokens holds one key `z` immediately followed by a
//! block of `q` anchors; every other position is a noise key. Reasoning
//! anchors define a rule (`label = z + sum(anchors)`), memory anchors a
//! lookup table filled with random labels on first use. Reasoning anchor
//! tuples listed in `masked_combos` never reach the training split.
//!
//! Positions follow the 1-based convention `p` for the key: the key sits at
//! `tokens[p - 1]` and the anchors at `tokens[p..p + q]`, so `p` ranges over
//! `1..=seq_len - q`.
//!
//! Generation runs one RNG stream per anchor combination (see [`crate::rng`])
//! and is parallel over combinations; output does not depend on the worker
//! count.

mod io;

pub use io::{
    load_dataset, load_memory_table, save_dataset, save_memory_table, write_dataset,
    write_memory_table,
};

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;

pub type Token = u32;

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("invalid task spec: {0}")]
    InvalidSpec(String),
    #[error(
        "label {sum} for key {key} and anchors {anchors:?} is outside the vocabulary [1, {vocab})"
    )]
    LabelOutOfRange {
        key: Token,
        anchors: Vec<Token>,
        sum: i64,
        vocab: usize,
    },
    #[error("token {token} is not a {role}")]
    Domain { token: Token, role: &'static str },
    #[error("{n_samples} samples cannot cover {combos} anchor combinations")]
    TooFewSamples { n_samples: usize, combos: usize },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = TaskError> = std::result::Result<T, E>;

/// Inclusive token interval `[lo, hi]`. Serialized as `[lo, hi]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[Token; 2]", into = "[Token; 2]")]
pub struct TokenRange {
    pub lo: Token,
    pub hi: Token,
}

impl From<[Token; 2]> for TokenRange {
    fn from([lo, hi]: [Token; 2]) -> Self {
        Self { lo, hi }
    }
}

impl From<TokenRange> for [Token; 2] {
    fn from(r: TokenRange) -> Self {
        [r.lo, r.hi]
    }
}

impl TokenRange {
    pub const fn new(lo: Token, hi: Token) -> Self {
        Self { lo, hi }
    }

    pub fn len(&self) -> usize {
        if self.hi < self.lo {
            0
        } else {
            (self.hi - self.lo) as usize + 1
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, t: Token) -> bool {
        self.lo <= t && t <= self.hi
    }

    pub fn iter(&self) -> impl Iterator<Item = Token> + Clone {
        self.lo..=self.hi
    }

    fn overlaps(&self, other: &TokenRange) -> bool {
        !self.is_empty() && !other.is_empty() && self.lo <= other.hi && other.lo <= self.hi
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Token {
        rng.random_range(self.lo..=self.hi)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "groups")]
pub enum MemLabelMode {
    /// Labels drawn uniformly from the key range.
    UniformOverKeys,
    /// Labels drawn uniformly from `z - sum(a) ..= z + sum(a)`.
    AnchorDependentWindow,
    /// Each anchor tuple is hashed to one group; labels are uniform on that
    /// group's interval.
    GroupedRanges(Vec<TokenRange>),
}

impl MemLabelMode {
    /// Four nested groups `30 ..= 29 + 20 i` for `i = 1..=4`.
    pub fn four_groups() -> Self {
        Self::GroupedRanges((1..=4).map(|i| TokenRange::new(30, 29 + 20 * i)).collect())
    }
}

/// Group index of an anchor tuple under [`MemLabelMode::GroupedRanges`]:
/// FNV-1a of the little-endian anchor bytes, modulo the group count.
pub fn anchor_group(anchors: &[Token], n_groups: usize) -> usize {
    let bytes: Vec<u8> = anchors.iter().flat_map(|a| a.to_le_bytes()).collect();
    (rng::fnv1a64(&bytes) % n_groups as u64) as usize
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub key_range: TokenRange,
    pub mem_anchor_range: TokenRange,
    pub rsn_anchor_range: TokenRange,
    pub q: usize,
    pub seq_len: usize,
    #[serde(default)]
    pub masked_combos: Vec<Vec<Token>>,
    pub vocab_size: usize,
    #[serde(default = "default_mode")]
    pub mem_label_mode: MemLabelMode,
    pub seed: u64,
}

fn default_mode() -> MemLabelMode {
    MemLabelMode::UniformOverKeys
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SampleKind {
    Memory,
    ReasoningTrain,
    ReasoningTest,
}

impl SampleKind {
    pub fn code(self) -> &'static str {
        match self {
            Self::Memory => "M",
            Self::ReasoningTrain => "RT",
            Self::ReasoningTest => "RE",
        }
    }

    pub fn from_code(s: &str) -> Option<Self> {
        match s {
            "M" => Some(Self::Memory),
            "RT" => Some(Self::ReasoningTrain),
            "RE" => Some(Self::ReasoningTest),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub tokens: Vec<Token>,
    pub label: Token,
    pub kind: SampleKind,
    /// 1-based position of the key; anchors occupy `key_pos + 1 ..= key_pos + q`.
    pub key_pos: usize,
}

impl Sample {
    pub fn key(&self) -> Token {
        self.tokens[self.key_pos - 1]
    }

    pub fn anchors(&self, q: usize) -> &[Token] {
        &self.tokens[self.key_pos..self.key_pos + q]
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetSplit {
    pub d_mem: Vec<Sample>,
    pub d_rsn_train: Vec<Sample>,
    pub d_rsn_test: Vec<Sample>,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.d_mem.len() + self.d_rsn_train.len() + self.d_rsn_test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Memory samples followed by reasoning training samples.
    pub fn training(&self) -> impl Iterator<Item = &Sample> {
        self.d_mem.iter().chain(&self.d_rsn_train)
    }

    pub fn all(&self) -> impl Iterator<Item = &Sample> {
        self.training().chain(&self.d_rsn_test)
    }
}

/// Memoized random labels for memory key-anchor tuples.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MemoryTable {
    entries: BTreeMap<(Token, Vec<Token>), Token>,
}

impl MemoryTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, key: Token, anchors: &[Token]) -> Option<Token> {
        self.entries.get(&(key, anchors.to_vec())).copied()
    }

    pub fn insert(&mut self, key: Token, anchors: Vec<Token>, label: Token) {
        self.entries.insert((key, anchors), label);
    }

    pub fn iter(&self) -> impl Iterator<Item = (Token, &[Token], Token)> {
        self.entries
            .iter()
            .map(|((k, a), l)| (*k, a.as_slice(), *l))
    }

    fn merge(&mut self, other: MemoryTable) {
        self.entries.extend(other.entries);
    }
}

impl TaskSpec {
    pub fn n_keys(&self) -> usize {
        self.key_range.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TaskError::InvalidSpec(m));
        let v = self.vocab_size as u64;
        let ranges = [
            ("key_range", self.key_range),
            ("mem_anchor_range", self.mem_anchor_range),
            ("rsn_anchor_range", self.rsn_anchor_range),
        ];
        for (name, r) in ranges {
            if r.is_empty() {
                return bad(format!("{name} is empty"));
            }
            if r.lo < 1 || u64::from(r.hi) >= v {
                return bad(format!("{name} [{}, {}] not inside [1, {v})", r.lo, r.hi));
            }
        }
        for i in 0..3 {
            for j in i + 1..3 {
                if ranges[i].1.overlaps(&ranges[j].1) {
                    return bad(format!("{} and {} overlap", ranges[i].0, ranges[j].0));
                }
            }
        }
        if self.q == 0 {
            return bad("q must be positive".into());
        }
        if self.seq_len < self.q + 1 {
            return bad(format!("seq_len {} < q + 1 = {}", self.seq_len, self.q + 1));
        }
        for c in &self.masked_combos {
            if c.len() != self.q || !c.iter().all(|a| self.rsn_anchor_range.contains(*a)) {
                return bad(format!(
                    "masked combo {c:?} is not a {}-tuple of reasoning anchors",
                    self.q
                ));
            }
        }
        let max_rsn =
            u64::from(self.key_range.hi) + self.q as u64 * u64::from(self.rsn_anchor_range.hi);
        if max_rsn >= v {
            return bad(format!(
                "largest reasoning label {max_rsn} does not fit the vocabulary of size {v}"
            ));
        }
        match &self.mem_label_mode {
            MemLabelMode::UniformOverKeys => {}
            MemLabelMode::AnchorDependentWindow => {
                let span = self.q as i64 * i64::from(self.mem_anchor_range.hi);
                let lo = i64::from(self.key_range.lo) - span;
                let hi = i64::from(self.key_range.hi) + span;
                if lo < 1 || hi >= v as i64 {
                    return bad(format!(
                        "memory label window [{lo}, {hi}] leaves the vocabulary"
                    ));
                }
            }
            MemLabelMode::GroupedRanges(groups) => {
                if groups.is_empty() {
                    return bad("grouped label mode needs at least one group".into());
                }
                for g in groups {
                    if g.is_empty() || g.lo < 1 || u64::from(g.hi) >= v {
                        return bad(format!(
                            "label group [{}, {}] not inside [1, {v})",
                            g.lo, g.hi
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn is_masked(&self, anchors: &[Token]) -> bool {
        self.masked_combos.iter().any(|c| c.as_slice() == anchors)
    }

    /// All `q`-tuples of memory anchors, lexicographic.
    pub fn memory_combos(&self) -> Vec<Vec<Token>> {
        all_tuples(self.mem_anchor_range, self.q)
    }

    pub fn reasoning_combos(&self) -> Vec<Vec<Token>> {
        all_tuples(self.rsn_anchor_range, self.q)
    }

    pub fn n_combos(&self) -> usize {
        self.mem_anchor_range.len().pow(self.q as u32)
            + self.rsn_anchor_range.len().pow(self.q as u32)
    }

    /// `z + sum(anchors)`.
    pub fn reasoning_label(&self, key: Token, anchors: &[Token]) -> Result<Token> {
        if !self.key_range.contains(key) {
            return Err(TaskError::Domain {
                token: key,
                role: "key",
            });
        }
        if let Some(&a) = anchors
            .iter()
            .find(|a| !self.rsn_anchor_range.contains(**a))
        {
            return Err(TaskError::Domain {
                token: a,
                role: "reasoning anchor",
            });
        }
        let sum = i64::from(key) + anchors.iter().map(|&a| i64::from(a)).sum::<i64>();
        if sum < 1 || sum >= self.vocab_size as i64 {
            return Err(TaskError::LabelOutOfRange {
                key,
                anchors: anchors.to_vec(),
                sum,
                vocab: self.vocab_size,
            });
        }
        Ok(sum as Token)
    }

    /// Label set a memory tuple draws from under the current mode.
    pub fn memory_label_range(&self, key: Token, anchors: &[Token]) -> TokenRange {
        match &self.mem_label_mode {
            MemLabelMode::UniformOverKeys => self.key_range,
            MemLabelMode::AnchorDependentWindow => {
                let s: Token = anchors.iter().sum();
                TokenRange::new(key.saturating_sub(s), key + s)
            }
            MemLabelMode::GroupedRanges(groups) => groups[anchor_group(anchors, groups.len())],
        }
    }

    /// Memoized lookup: the first call for a tuple draws from the mode's label
    /// set and stores it, later calls return the stored label.
    pub fn memory_label<R: Rng + ?Sized>(
        &self,
        table: &mut MemoryTable,
        key: Token,
        anchors: &[Token],
        rng: &mut R,
    ) -> Result<Token> {
        if let Some(&a) = anchors
            .iter()
            .find(|a| !self.mem_anchor_range.contains(**a))
        {
            return Err(TaskError::Domain {
                token: a,
                role: "memory anchor",
            });
        }
        if let Some(l) = table.get(key, anchors) {
            return Ok(l);
        }
        let label = self.memory_label_range(key, anchors).sample(rng);
        table.insert(key, anchors.to_vec(), label);
        Ok(label)
    }

    /// Recomputes a stored sample's label from its key-anchor pair alone.
    pub fn relabel(&self, sample: &Sample, table: &MemoryTable) -> Result<Token> {
        let anchors = sample.anchors(self.q);
        match sample.kind {
            SampleKind::Memory => table.get(sample.key(), anchors).ok_or_else(|| {
                TaskError::InvalidSpec(format!(
                    "memory tuple ({}, {anchors:?}) missing from table",
                    sample.key()
                ))
            }),
            _ => self.reasoning_label(sample.key(), anchors),
        }
    }

    fn random_sequence<R: Rng + ?Sized>(
        &self,
        anchors: &[Token],
        rng: &mut R,
    ) -> (Vec<Token>, usize) {
        let key = self.key_range.sample(rng);
        let p = rng.random_range(1..=self.seq_len - self.q);
        let mut tokens = Vec::with_capacity(self.seq_len);
        for i in 0..self.seq_len {
            let t = if i + 1 == p {
                key
            } else if i >= p && i < p + self.q {
                anchors[i - p]
            } else {
                self.key_range.sample(rng)
            };
            tokens.push(t);
        }
        (tokens, p)
    }
}

fn all_tuples(range: TokenRange, q: usize) -> Vec<Vec<Token>> {
    let mut out = vec![Vec::new()];
    for _ in 0..q {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                range.iter().map(move |a| {
                    let mut t = prefix.clone();
                    t.push(a);
                    t
                })
            })
            .collect();
    }
    out
}

/// Splits `total` over `n` slots, remainder to the first slots.
fn share(total: usize, n: usize, i: usize) -> usize {
    total / n + usize::from(i < total % n)
}

/// Generates the three splits and the memory table.
///
/// Half the samples (rounded up) are memory samples, spread evenly over the
/// memory combinations; the rest spread evenly over reasoning combinations.
pub fn generate_dataset(spec: &TaskSpec, n_samples: usize) -> Result<(DatasetSplit, MemoryTable)> {
    spec.validate()?;
    let mem = spec.memory_combos();
    let rsn = spec.reasoning_combos();
    let combos = mem.len() + rsn.len();
    let n_mem = n_samples.div_ceil(2);
    let n_rsn = n_samples - n_mem;
    if n_mem < mem.len() || n_rsn < rsn.len() {
        return Err(TaskError::TooFewSamples { n_samples, combos });
    }

    let jobs: Vec<(usize, bool, &Vec<Token>, usize)> = mem
        .iter()
        .enumerate()
        .map(|(i, c)| (i, true, c, share(n_mem, mem.len(), i)))
        .chain(
            rsn.iter()
                .enumerate()
                .map(|(i, c)| (mem.len() + i, false, c, share(n_rsn, rsn.len(), i))),
        )
        .collect();

    let parts: Vec<Result<(Vec<Sample>, MemoryTable)>> = jobs
        .par_iter()
        .map(|&(id, is_mem, anchors, count)| {
            let mut r = rng::stream(spec.seed, rng::DATASET_BASE + id as u64);
            let mut table = MemoryTable::new();
            let kind = if is_mem {
                SampleKind::Memory
            } else if spec.is_masked(anchors) {
                SampleKind::ReasoningTest
            } else {
                SampleKind::ReasoningTrain
            };
            let mut samples = Vec::with_capacity(count);
            for _ in 0..count {
                let (tokens, key_pos) = spec.random_sequence(anchors, &mut r);
                let key = tokens[key_pos - 1];
                let label = if is_mem {
                    spec.memory_label(&mut table, key, anchors, &mut r)?
                } else {
                    spec.reasoning_label(key, anchors)?
                };
                samples.push(Sample {
                    tokens,
                    label,
                    kind,
                    key_pos,
                });
            }
            Ok((samples, table))
        })
        .collect();

    let mut split = DatasetSplit::default();
    let mut table = MemoryTable::new();
    for part in parts {
        let (samples, t) = part?;
        table.merge(t);
        for s in samples {
            match s.kind {
                SampleKind::Memory => split.d_mem.push(s),
                SampleKind::ReasoningTrain => split.d_rsn_train.push(s),
                SampleKind::ReasoningTest => split.d_rsn_test.push(s),
            }
        }
    }
    Ok((split, table))
}

/// Every `(key, anchor tuple)` exactly once per kind, key first, with memory
/// labels laid out as a Latin square over the keys:
/// `key_lo + (key index + sum(anchors)) mod N_Z`. Each memory anchor then
/// sees exactly uniform labels on the key range in every slot, so the set
/// realizes the closed-form label laws without sampling noise.
///
/// Needs `seq_len = q + 1`, no masked pairs, uniform memory labels and equal
/// anchor ranges (the laws assume an even memory/reasoning split).
pub fn balanced_enumeration(spec: &TaskSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    let bad = |m: &str| Err(TaskError::InvalidSpec(format!("balanced enumeration: {m}")));
    if spec.seq_len != spec.q + 1 {
        return bad("needs seq_len = q + 1");
    }
    if !spec.masked_combos.is_empty() {
        return bad("needs no masked pairs");
    }
    if spec.mem_label_mode != MemLabelMode::UniformOverKeys {
        return bad("needs uniform memory labels");
    }
    if spec.mem_anchor_range.len() != spec.rsn_anchor_range.len() {
        return bad("needs anchor ranges of equal size");
    }
    let nz = spec.key_range.len() as Token;
    let mut out = Vec::new();
    for (zi, z) in spec.key_range.iter().enumerate() {
        for anchors in spec.memory_combos() {
            let sum: Token = anchors.iter().sum();
            let mut tokens = vec![z];
            tokens.extend_from_slice(&anchors);
            out.push(Sample {
                tokens,
                label: spec.key_range.lo + (zi as Token + sum) % nz,
                kind: SampleKind::Memory,
                key_pos: 1,
            });
        }
        for anchors in spec.reasoning_combos() {
            let label = spec.reasoning_label(z, &anchors)?;
            let mut tokens = vec![z];
            tokens.extend_from_slice(&anchors);
            out.push(Sample {
                tokens,
                label,
                kind: SampleKind::ReasoningTrain,
                key_pos: 1,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn s31() -> TaskSpec {
        TaskSpec {
            key_range: TokenRange::new(21, 120),
            mem_anchor_range: TokenRange::new(1, 10),
            rsn_anchor_range: TokenRange::new(11, 20),
            q: 2,
            seq_len: 9,
            masked_combos: vec![vec![11, 13], vec![13, 11]],
            vocab_size: 200,
            mem_label_mode: MemLabelMode::UniformOverKeys,
            seed: 1,
        }
    }

    #[test]
    fn reasoning_label_examples() {
        let s = s31();
        assert_eq!(s.reasoning_label(57, &[12, 14]).unwrap(), 83);
        assert_eq!(s.reasoning_label(21, &[11, 11]).unwrap(), 43);
        assert_eq!(s.reasoning_label(120, &[20, 20]).unwrap(), 160);
        let mut small = s31();
        small.vocab_size = 150;
        match small.reasoning_label(120, &[20, 20]) {
            Err(TaskError::LabelOutOfRange { sum, .. }) => assert_eq!(sum, 160),
            other => panic!("{other:?}"),
        }
        assert!(s.reasoning_label(57, &[3, 14]).is_err());
    }

    #[test]
    fn reasoning_label_max_by_enumeration() {
        let s = s31();
        let mut best = 0;
        for z in s.key_range.iter() {
            for a in s.reasoning_combos() {
                best = best.max(s.reasoning_label(z, &a).unwrap());
            }
        }
        assert_eq!(best, 160);
    }

    #[test]
    fn memory_label_is_memoized() {
        let s = s31();
        let mut t = MemoryTable::new();
        let mut r = rng::stream(5, 0);
        let a = s.memory_label(&mut t, 50, &[3, 5], &mut r).unwrap();
        for _ in 0..10 {
            assert_eq!(s.memory_label(&mut t, 50, &[3, 5], &mut r).unwrap(), a);
        }
        assert!(s.memory_label(&mut t, 50, &[3, 15], &mut r).is_err());
    }

    #[test]
    fn window_mode_bounds() {
        let mut s = s31();
        s.mem_label_mode = MemLabelMode::AnchorDependentWindow;
        let mut r = rng::stream(6, 0);
        for _ in 0..2000 {
            let mut t = MemoryTable::new();
            let l = s.memory_label(&mut t, 50, &[3, 5], &mut r).unwrap();
            assert!((42..=58).contains(&l));
        }
    }

    #[test]
    fn grouped_mode_uses_group_interval() {
        let mut s = s31();
        s.mem_label_mode = MemLabelMode::four_groups();
        let mut r = rng::stream(7, 0);
        let mut t = MemoryTable::new();
        for a in s.memory_combos() {
            let g = anchor_group(&a, 4);
            let hi = 29 + 20 * (g as Token + 1);
            for z in [21, 70, 120] {
                let l = s.memory_label(&mut t, z, &a, &mut r).unwrap();
                assert!((30..=hi).contains(&l));
            }
        }
        let used: std::collections::BTreeSet<_> = s
            .memory_combos()
            .iter()
            .map(|a| anchor_group(a, 4))
            .collect();
        assert_eq!(used.len(), 4);
    }

    #[test]
    fn combination_count_and_balance() {
        let s = s31();
        assert_eq!(s.memory_combos().len() + s.reasoning_combos().len(), 200);
        assert_eq!(s.n_combos(), 200);
        let (d, _) = generate_dataset(&s, 200_000).unwrap();
        let mut counts: BTreeMap<Vec<Token>, usize> = BTreeMap::new();
        for x in d.all() {
            *counts.entry(x.anchors(2).to_vec()).or_default() += 1;
        }
        assert_eq!(counts.len(), 200);
        assert!(counts.values().all(|&c| c == 1000));
    }

    #[test]
    fn masked_combos_only_in_test() {
        let s = s31();
        let (d, _) = generate_dataset(&s, 20_000).unwrap();
        assert_eq!(d.d_rsn_test.len(), 200);
        for x in &d.d_rsn_test {
            assert!(s.is_masked(x.anchors(2)));
        }
        for x in d.training() {
            assert!(!s.is_masked(x.anchors(2)));
        }
        let mut open = s.clone();
        open.masked_combos.clear();
        assert!(generate_dataset(&open, 20_000)
            .unwrap()
            .0
            .d_rsn_test
            .is_empty());
    }

    #[test]
    fn remainder_goes_to_first_combos() {
        let s = s31();
        let (d, _) = generate_dataset(&s, 203).unwrap();
        assert_eq!(d.d_mem.len(), 102);
        assert_eq!(d.d_mem.iter().filter(|x| x.anchors(2) == [1, 1]).count(), 2);
        assert_eq!(d.d_mem.iter().filter(|x| x.anchors(2) == [1, 3]).count(), 1);
        assert!(matches!(
            generate_dataset(&s, 150),
            Err(TaskError::TooFewSamples { .. })
        ));
    }

    #[test]
    fn sequences_have_one_anchor_block() {
        let s = s31();
        let (d, t) = generate_dataset(&s, 4000).unwrap();
        for x in d.all() {
            assert_eq!(x.tokens.len(), 9);
            assert!(x.key_pos >= 1 && x.key_pos + 2 <= 9);
            for (i, &tok) in x.tokens.iter().enumerate() {
                let in_block = i >= x.key_pos && i < x.key_pos + 2;
                assert_eq!(in_block, !s.key_range.contains(tok), "{x:?}");
            }
            assert_eq!(s.relabel(x, &t).unwrap(), x.label);
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = s31();
        s.rsn_anchor_range = TokenRange::new(10, 20);
        assert!(s.validate().is_err());
        let mut s = s31();
        s.seq_len = 2;
        assert!(s.validate().is_err());
        let mut s = s31();
        s.masked_combos = vec![vec![1, 13]];
        assert!(s.validate().is_err());
        let mut s = s31();
        s.vocab_size = 160;
        assert!(s.validate().is_err());
    }

    #[test]
    fn spec_json_round_trip() {
        let s = s31();
        let j = serde_json::to_string(&s).unwrap();
        assert!(j.contains("\"key_range\":[21,120]"));
        assert_eq!(serde_json::from_str::<TaskSpec>(&j).unwrap(), s);
        let mut g = s31();
        g.mem_label_mode = MemLabelMode::four_groups();
        let j = serde_json::to_string(&g).unwrap();
        assert_eq!(serde_json::from_str::<TaskSpec>(&j).unwrap(), g);
    }
}
