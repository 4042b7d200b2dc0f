//! Metric records, sinks and the CSV/JSON run files.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::ops::ControlFlow;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Result, TrainError};
use crate::models::ModelCheckpoint;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Mem,
    RsnTrain,
    RsnTest,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Mem, Split::RsnTrain, Split::RsnTest];

    pub fn name(self) -> &'static str {
        match self {
            Self::Mem => "mem",
            Self::RsnTrain => "rsn_train",
            Self::RsnTest => "rsn_test",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|x| x.name() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub accuracy: f64,
}

/// Receives each evaluation (one record per non-empty split) together with
/// the model at that point. Returning `Break` ends training after this
/// evaluation.
pub trait MetricsSink {
    fn record(
        &mut self,
        records: &[MetricsRecord],
        model: &ModelCheckpoint,
    ) -> Result<ControlFlow<()>>;
}

/// Keeps every record in memory.
#[derive(Debug, Default)]
pub struct MemorySink {
    pub records: Vec<MetricsRecord>,
}

impl MetricsSink for MemorySink {
    fn record(
        &mut self,
        records: &[MetricsRecord],
        _: &ModelCheckpoint,
    ) -> Result<ControlFlow<()>> {
        self.records.extend_from_slice(records);
        Ok(ControlFlow::Continue(()))
    }
}

/// Adapts a closure into a sink.
pub struct FnSink<F>(pub F);

impl<F> MetricsSink for FnSink<F>
where
    F: FnMut(&[MetricsRecord], &ModelCheckpoint) -> Result<ControlFlow<()>>,
{
    fn record(
        &mut self,
        records: &[MetricsRecord],
        model: &ModelCheckpoint,
    ) -> Result<ControlFlow<()>> {
        (self.0)(records, model)
    }
}

/// Streams records to a metrics CSV as they arrive.
pub struct CsvSink<W: Write> {
    out: W,
}

impl CsvSink<BufWriter<File>> {
    pub fn create(path: &Path) -> Result<Self> {
        Self::new(BufWriter::new(File::create(path)?))
    }
}

impl<W: Write> CsvSink<W> {
    pub fn new(mut out: W) -> Result<Self> {
        writeln!(out, "epoch,split,loss,accuracy")?;
        Ok(Self { out })
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

impl<W: Write> MetricsSink for CsvSink<W> {
    fn record(
        &mut self,
        records: &[MetricsRecord],
        _: &ModelCheckpoint,
    ) -> Result<ControlFlow<()>> {
        for r in records {
            writeln!(
                self.out,
                "{},{},{},{}",
                r.epoch,
                r.split.name(),
                r.loss,
                r.accuracy
            )?;
        }
        self.out.flush()?;
        Ok(ControlFlow::Continue(()))
    }
}

/// Fans records out to two sinks; stops when either asks to.
pub struct Tee<A, B>(pub A, pub B);

impl<A: MetricsSink, B: MetricsSink> MetricsSink for Tee<A, B> {
    fn record(
        &mut self,
        records: &[MetricsRecord],
        model: &ModelCheckpoint,
    ) -> Result<ControlFlow<()>> {
        let a = self.0.record(records, model)?;
        let b = self.1.record(records, model)?;
        Ok(if a.is_break() || b.is_break() {
            ControlFlow::Break(())
        } else {
            ControlFlow::Continue(())
        })
    }
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRecord>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if i == 0 {
            if line != "epoch,split,loss,accuracy" {
                return Err(TrainError::Metrics(format!("bad header {line:?}")));
            }
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        let bad = || TrainError::Metrics(format!("line {}: {line:?}", i + 1));
        if f.len() != 4 {
            return Err(bad());
        }
        out.push(MetricsRecord {
            epoch: f[0].parse().map_err(|_| bad())?,
            split: Split::from_name(f[1]).ok_or_else(bad)?,
            loss: f[2].parse().map_err(|_| bad())?,
            accuracy: f[3].parse().map_err(|_| bad())?,
        });
    }
    Ok(out)
}

/// Run sidecar written next to the metrics CSV.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunMetadata {
    pub version: String,
    pub config: serde_json::Value,
    pub wall_clock_secs: f64,
    pub epochs_run: usize,
    pub stopped_early: bool,
}

/// `v<crate version>`, with a `git describe` string appended when one was
/// supplied at build time through `BIASLAB_GIT_DESCRIBE`.
pub fn version_string() -> String {
    match option_env!("BIASLAB_GIT_DESCRIBE") {
        Some(d) if !d.is_empty() => format!("v{}-{d}", env!("CARGO_PKG_VERSION")),
        _ => format!("v{}", env!("CARGO_PKG_VERSION")),
    }
}

pub fn write_run_metadata(path: &Path, meta: &RunMetadata) -> Result<()> {
    let f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(f, meta).map_err(|e| TrainError::Metrics(e.to_string()))?;
    Ok(())
}

/// Latest record for `split` at or before `epoch`.
pub fn record_at(records: &[MetricsRecord], split: Split, epoch: usize) -> Option<&MetricsRecord> {
    records
        .iter()
        .filter(|r| r.split == split && r.epoch <= epoch)
        .max_by_key(|r| r.epoch)
}

/// First evaluated epoch at which `split` reaches `accuracy >= threshold`.
pub fn first_crossing(records: &[MetricsRecord], split: Split, threshold: f64) -> Option<usize> {
    records
        .iter()
        .filter(|r| r.split == split && r.accuracy >= threshold)
        .map(|r| r.epoch)
        .min()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn recs() -> Vec<MetricsRecord> {
        let mut v = Vec::new();
        for (e, a) in [(0, 0.0), (5, 0.5), (10, 0.95), (15, 0.97)] {
            for s in Split::ALL {
                v.push(MetricsRecord {
                    epoch: e,
                    split: s,
                    loss: 1.0 / (e as f64 + 1.0),
                    accuracy: if s == Split::Mem { a / 2.0 } else { a },
                });
            }
        }
        v
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let model = crate::models::ModelCheckpoint::init(&crate::models::tests::small(
            crate::models::ModelFamily::EmbMlp,
        ))
        .unwrap();
        let mut sink = CsvSink::create(&p).unwrap();
        let _ = sink.record(&recs(), &model).unwrap();
        drop(sink);
        assert_eq!(read_metrics_csv(&p).unwrap(), recs());
    }

    #[test]
    fn crossing_and_lookup() {
        let r = recs();
        assert_eq!(first_crossing(&r, Split::RsnTest, 0.9), Some(10));
        assert_eq!(first_crossing(&r, Split::Mem, 0.9), None);
        assert_eq!(record_at(&r, Split::Mem, 12).unwrap().epoch, 10);
    }
}
