//! Plain-text dataset and memory-table files.
//!
//! Dataset: a header `#anchor-dataset v1 L=<L> q=<q> seed=<seed>` followed by
//! one `kind,label,tok_1,...,tok_L` row per sample (`kind` is `M`, `RT` or
//! `RE`). Memory table: one `z,a_1,...,a_q,label` row per tuple.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::{DatasetSplit, MemoryTable, Result, Sample, SampleKind, TaskError, TaskSpec, Token};

pub fn write_dataset<W: Write>(mut w: W, split: &DatasetSplit, spec: &TaskSpec) -> Result<()> {
    writeln!(
        w,
        "#anchor-dataset v1 L={} q={} seed={}",
        spec.seq_len, spec.q, spec.seed
    )?;
    for s in split.all() {
        write!(w, "{},{}", s.kind.code(), s.label)?;
        for t in &s.tokens {
            write!(w, ",{t}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_dataset(path: &Path, split: &DatasetSplit, spec: &TaskSpec) -> Result<()> {
    write_dataset(BufWriter::new(File::create(path)?), split, spec)
}

fn header_field(header: &str, key: &str) -> Option<u64> {
    header
        .split_whitespace()
        .find_map(|f| f.strip_prefix(key)?.strip_prefix('=')?.parse().ok())
}

/// Reads a dataset written for `spec`. The key position of each row is
/// recovered as the token just before the first non-key token.
pub fn load_dataset(path: &Path, spec: &TaskSpec) -> Result<DatasetSplit> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines().enumerate();
    let perr = |line: usize, msg: String| TaskError::Parse { line, msg };

    let (_, header) = lines
        .next()
        .ok_or_else(|| perr(1, "missing header".into()))?;
    let header = header?;
    if !header.starts_with("#anchor-dataset v1") {
        return Err(perr(1, format!("bad header {header:?}")));
    }
    let (l, q) = (header_field(&header, "L"), header_field(&header, "q"));
    if l != Some(spec.seq_len as u64)
        || q != Some(spec.q as u64)
        || header_field(&header, "seed").is_none()
    {
        return Err(perr(
            1,
            format!(
                "header {header:?} does not match L={} q={}",
                spec.seq_len, spec.q
            ),
        ));
    }

    let mut split = DatasetSplit::default();
    for (i, line) in lines {
        let n = i + 1;
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let kind = fields
            .next()
            .and_then(SampleKind::from_code)
            .ok_or_else(|| perr(n, "unknown sample kind".into()))?;
        let nums: Vec<Token> = fields
            .map(|f| f.trim().parse::<Token>())
            .collect::<Result<_, _>>()
            .map_err(|e| perr(n, format!("bad integer: {e}")))?;
        if nums.len() != spec.seq_len + 1 {
            return Err(perr(
                n,
                format!("expected {} tokens, found {}", spec.seq_len, nums.len() - 1),
            ));
        }
        if let Some(bad) = nums.iter().find(|&&t| t as usize >= spec.vocab_size) {
            return Err(perr(
                n,
                format!("token {bad} >= vocabulary size {}", spec.vocab_size),
            ));
        }
        let label = nums[0];
        let tokens = nums[1..].to_vec();
        let first_anchor = tokens
            .iter()
            .position(|&t| !spec.key_range.contains(t))
            .ok_or_else(|| perr(n, "no anchor block".into()))?;
        if first_anchor == 0 || first_anchor + spec.q > spec.seq_len {
            return Err(perr(n, "anchor block is not preceded by a key".into()));
        }
        let sample = Sample {
            tokens,
            label,
            kind,
            key_pos: first_anchor,
        };
        match kind {
            SampleKind::Memory => split.d_mem.push(sample),
            SampleKind::ReasoningTrain => split.d_rsn_train.push(sample),
            SampleKind::ReasoningTest => split.d_rsn_test.push(sample),
        }
    }
    Ok(split)
}

pub fn write_memory_table<W: Write>(mut w: W, table: &MemoryTable) -> Result<()> {
    for (z, anchors, label) in table.iter() {
        write!(w, "{z}")?;
        for a in anchors {
            write!(w, ",{a}")?;
        }
        writeln!(w, ",{label}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_memory_table(path: &Path, table: &MemoryTable) -> Result<()> {
    write_memory_table(BufWriter::new(File::create(path)?), table)
}

pub fn load_memory_table(path: &Path, q: usize) -> Result<MemoryTable> {
    let mut table = MemoryTable::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let nums: Vec<Token> = line
            .split(',')
            .map(|f| f.trim().parse::<Token>())
            .collect::<Result<_, _>>()
            .map_err(|e| TaskError::Parse {
                line: i + 1,
                msg: format!("bad integer: {e}"),
            })?;
        if nums.len() != q + 2 {
            return Err(TaskError::Parse {
                line: i + 1,
                msg: format!("expected {} fields, found {}", q + 2, nums.len()),
            });
        }
        table.insert(nums[0], nums[1..=q].to_vec(), nums[q + 1]);
    }
    Ok(table)
}
