//! CSV and JSON emitters for diagnostics.
//!
//! Matrices are `i,j,value` with `i` and `j` the row and column labels
//! (tokens or 1-based positions); an undefined entry has an empty value.
//! Spectra are `rank,sigma` with 1-based rank.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use super::{PcaProjection, Result, SimilarityMatrix};
use crate::tasks::Token;

pub fn write_matrix_csv<W: Write>(
    mut w: W,
    labels: &[Token],
    values: &[Vec<Option<f64>>],
) -> Result<()> {
    writeln!(w, "i,j,value")?;
    for (i, row) in values.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            match v {
                Some(x) => writeln!(w, "{},{},{x}", labels[i], labels[j])?,
                None => writeln!(w, "{},{},", labels[i], labels[j])?,
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Dense matrix with 1-based row and column indices.
pub fn write_dense_csv<W: Write>(w: W, values: &[Vec<f64>]) -> Result<()> {
    let n = values.len().max(values.first().map_or(0, Vec::len));
    let labels: Vec<Token> = (1..=n as Token).collect();
    let opt: Vec<Vec<Option<f64>>> = values
        .iter()
        .map(|r| r.iter().copied().map(Some).collect())
        .collect();
    write_matrix_csv(w, &labels, &opt)
}

pub fn write_similarity_csv<W: Write>(w: W, m: &SimilarityMatrix) -> Result<()> {
    write_matrix_csv(w, &m.tokens, &m.values)
}

pub fn write_spectrum_csv<W: Write>(mut w: W, sigma: &[f64]) -> Result<()> {
    writeln!(w, "rank,sigma")?;
    for (r, s) in sigma.iter().enumerate() {
        writeln!(w, "{},{s}", r + 1)?;
    }
    w.flush()?;
    Ok(())
}

/// `token,pc1,pc2,...`.
pub fn write_pca_csv<W: Write>(mut w: W, p: &PcaProjection) -> Result<()> {
    let header: Vec<String> = (1..=p.directions.len()).map(|c| format!("pc{c}")).collect();
    writeln!(w, "token,{}", header.join(","))?;
    for (t, row) in p.tokens.iter().zip(&p.coords) {
        let cols: Vec<String> = row.iter().map(|x| x.to_string()).collect();
        writeln!(w, "{t},{}", cols.join(","))?;
    }
    w.flush()?;
    Ok(())
}

/// `position,score` rows of a last-row profile head.
pub fn write_profile_csv<W: Write>(mut w: W, scores: &[f64]) -> Result<()> {
    writeln!(w, "position,score")?;
    for (i, s) in scores.iter().enumerate() {
        writeln!(w, "{},{s}", i + 1)?;
    }
    w.flush()?;
    Ok(())
}

pub fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}
