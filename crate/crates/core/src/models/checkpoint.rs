//! Binary checkpoint files.
//!
//! ```text
//! #ckpt v1
//! family=DecoderTransformer
//! d_vob=121
//! ...
//! epoch=40
//! params=<count>
//! <name> <rows> <cols>\n<rows*cols little-endian f64>
//! ...
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use indexmap::IndexMap;

use super::{ModelCheckpoint, ModelConfig, ModelError, ModelFamily, Result};
use crate::tensor::{ActivationKind, ActivationSpec, Tensor};

pub fn write_checkpoint<W: Write>(mut w: W, ckpt: &ModelCheckpoint) -> Result<()> {
    let c = &ckpt.config;
    writeln!(w, "#ckpt v1")?;
    writeln!(w, "family={}", c.family.name())?;
    for (k, v) in [
        ("d_vob", c.d_vob),
        ("d_m", c.d_m),
        ("d_f", c.d_f),
        ("d_k", c.d_k),
        ("n_layers", c.n_layers),
        ("n_heads", c.n_heads),
        ("max_seq_len", c.max_seq_len),
    ] {
        writeln!(w, "{k}={v}")?;
    }
    // Rust's float Display is the shortest string that parses back exactly.
    writeln!(w, "gamma={}", c.gamma)?;
    writeln!(w, "use_layer_norm={}", c.use_layer_norm)?;
    let act = match c.activation.kind {
        ActivationKind::Tanh => "tanh",
        ActivationKind::Gelu => "gelu",
    };
    writeln!(w, "activation={act}")?;
    writeln!(w, "activation_bound={}", c.activation.derivative_bound)?;
    writeln!(w, "ln_eps={}", c.ln_eps)?;
    writeln!(w, "seed={}", c.seed)?;
    writeln!(w, "epoch={}", ckpt.epoch)?;
    writeln!(w, "params={}", ckpt.params.len())?;
    for (name, t) in &ckpt.params {
        writeln!(w, "{name} {} {}", t.rows(), t.cols())?;
        for x in t.data() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save_checkpoint(path: &Path, ckpt: &ModelCheckpoint) -> Result<()> {
    write_checkpoint(BufWriter::new(File::create(path)?), ckpt)
}

fn read_line<R: BufRead>(r: &mut R) -> Result<String> {
    let mut s = String::new();
    if r.read_line(&mut s)? == 0 {
        return Err(ModelError::Parse("unexpected end of file".into()));
    }
    Ok(s.trim_end_matches('\n').to_string())
}

fn field<T: std::str::FromStr>(kv: &IndexMap<String, String>, key: &str) -> Result<T> {
    let v = kv
        .get(key)
        .ok_or_else(|| ModelError::Parse(format!("missing config key {key}")))?;
    v.parse()
        .map_err(|_| ModelError::Parse(format!("bad value {v:?} for {key}")))
}

/// Reads and validates a checkpoint: every parameter must exist with the
/// shape its config implies, and errors name the offending parameter.
pub fn read_checkpoint<R: BufRead>(mut r: R) -> Result<ModelCheckpoint> {
    if read_line(&mut r)? != "#ckpt v1" {
        return Err(ModelError::Parse("missing #ckpt v1 header".into()));
    }
    let mut kv = IndexMap::new();
    let n_params: usize = loop {
        let line = read_line(&mut r)?;
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| ModelError::Parse(format!("bad config line {line:?}")))?;
        if k == "params" {
            break v
                .parse()
                .map_err(|_| ModelError::Parse(format!("bad parameter count {v:?}")))?;
        }
        kv.insert(k.to_string(), v.to_string());
    };
    let family_name: String = field(&kv, "family")?;
    let kind = match field::<String>(&kv, "activation")?.as_str() {
        "tanh" => ActivationKind::Tanh,
        "gelu" => ActivationKind::Gelu,
        other => return Err(ModelError::Parse(format!("unknown activation {other}"))),
    };
    let config = ModelConfig {
        family: ModelFamily::from_name(&family_name)
            .ok_or_else(|| ModelError::Parse(format!("unknown family {family_name}")))?,
        d_vob: field(&kv, "d_vob")?,
        d_m: field(&kv, "d_m")?,
        d_f: field(&kv, "d_f")?,
        d_k: field(&kv, "d_k")?,
        n_layers: field(&kv, "n_layers")?,
        n_heads: field(&kv, "n_heads")?,
        gamma: field(&kv, "gamma")?,
        use_layer_norm: field(&kv, "use_layer_norm")?,
        activation: ActivationSpec {
            kind,
            derivative_bound: field(&kv, "activation_bound")?,
        },
        max_seq_len: field(&kv, "max_seq_len")?,
        ln_eps: field(&kv, "ln_eps")?,
        seed: field(&kv, "seed")?,
    };
    let epoch = field(&kv, "epoch")?;

    let mut params = IndexMap::new();
    for _ in 0..n_params {
        let line = read_line(&mut r)?;
        let parts: Vec<&str> = line.split(' ').collect();
        let (name, rows, cols) = match parts.as_slice() {
            [n, rs, cs] => (
                n.to_string(),
                rs.parse::<usize>()
                    .map_err(|_| ModelError::Parse(format!("bad rows in {line:?}")))?,
                cs.parse::<usize>()
                    .map_err(|_| ModelError::Parse(format!("bad cols in {line:?}")))?,
            ),
            _ => return Err(ModelError::Parse(format!("bad parameter header {line:?}"))),
        };
        let mut buf = vec![0u8; rows * cols * 8];
        r.read_exact(&mut buf).map_err(|_| ModelError::Param {
            name: name.clone(),
            msg: "payload truncated".into(),
        })?;
        let data = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params.insert(name, Tensor::from_vec(rows, cols, data)?);
    }
    let ckpt = ModelCheckpoint {
        config,
        params,
        epoch,
    };
    ckpt.validate()?;
    Ok(ckpt)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelCheckpoint> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
