//! The three model families and their parameter sets.
//!
//! Parameter counts, with `V = d_vob`, `L = max_seq_len`, `n = n_layers`:
//!
//! | family               | parameters |
//! |----------------------|------------|
//! | `EmbMlp`             | `V d_m + d_m d_f + d_f V` |
//! | `OneLayerTheory`     | `V d_m + 3 d_m d_k + d_k d_m + 2 d_m d_f` |
//! | `DecoderTransformer` | `V d_m + L d_m + n (4 d_m d_k + 2 d_m d_f + 4 d_m [with LN]) + d_m V` |
//!
//! Every weight matrix is drawn from `N(0, (rows^-gamma)^2)` where `rows` is
//! its input dimension (the position table counts `L` as its input dimension).
//! LayerNorm gains start at 1 and biases at 0, untouched by `gamma`. No
//! parameter has a bias vector.

mod checkpoint;
mod forward;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use forward::{AttentionMode, DecoderTrace, ForwardOutput};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;
use crate::tensor::{init_matrix, ActivationSpec, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("operation needs the {expected:?} family, model is {found:?}")]
    WrongFamily {
        expected: ModelFamily,
        found: ModelFamily,
    },
    #[error("sequence length {len} exceeds the positional table of {max}")]
    SeqTooLong { len: usize, max: usize },
    #[error("token {token} outside the vocabulary of {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },
    #[error("checkpoint parameter {name}: {msg}")]
    Param { name: String, msg: String },
    #[error("checkpoint parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelFamily {
    EmbMlp,
    OneLayerTheory,
    DecoderTransformer,
}

impl ModelFamily {
    pub fn name(self) -> &'static str {
        match self {
            Self::EmbMlp => "EmbMlp",
            Self::OneLayerTheory => "OneLayerTheory",
            Self::DecoderTransformer => "DecoderTransformer",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        [Self::EmbMlp, Self::OneLayerTheory, Self::DecoderTransformer]
            .into_iter()
            .find(|f| f.name() == s)
    }
}

fn default_ln_eps() -> f64 {
    1e-5
}

fn default_true() -> bool {
    true
}

fn default_one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub family: ModelFamily,
    pub d_vob: usize,
    pub d_m: usize,
    pub d_f: usize,
    pub d_k: usize,
    #[serde(default = "default_one")]
    pub n_layers: usize,
    #[serde(default = "default_one")]
    pub n_heads: usize,
    pub gamma: f64,
    #[serde(default = "default_true")]
    pub use_layer_norm: bool,
    #[serde(default)]
    pub activation: ActivationSpec,
    /// Rows of the position table; the longest sequence the model accepts.
    pub max_seq_len: usize,
    #[serde(default = "default_ln_eps")]
    pub ln_eps: f64,
    /// Seed for parameter initialization.
    #[serde(default)]
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::Config(m));
        for (n, v) in [
            ("d_vob", self.d_vob),
            ("d_m", self.d_m),
            ("d_f", self.d_f),
            ("d_k", self.d_k),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("max_seq_len", self.max_seq_len),
        ] {
            if v == 0 {
                return bad(format!("{n} must be positive"));
            }
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad(format!(
                "gamma must be a finite value >= 0, got {}",
                self.gamma
            ));
        }
        if self.d_k > self.d_m {
            return bad(format!("d_k {} exceeds d_m {}", self.d_k, self.d_m));
        }
        if self.d_k % self.n_heads != 0 {
            return bad(format!(
                "d_k {} not divisible by n_heads {}",
                self.d_k, self.n_heads
            ));
        }
        if !(self.ln_eps >= 0.0) {
            return bad("ln_eps must be >= 0".into());
        }
        if self.family == ModelFamily::OneLayerTheory {
            if self.n_heads != 1 || self.n_layers != 1 {
                return bad("the one-layer model is single-head and single-layer".into());
            }
            if self.d_vob != self.d_m {
                return bad(format!(
                    "the one-layer model reads logits in embedding space and needs d_vob == d_m, got {} and {}",
                    self.d_vob, self.d_m
                ));
            }
        }
        Ok(())
    }

    /// `(name, rows, cols)` for every parameter, in canonical order.
    pub fn param_shapes(&self) -> Vec<(String, usize, usize)> {
        let (v, m, f, k) = (self.d_vob, self.d_m, self.d_f, self.d_k);
        let mut out = vec![("emb".to_string(), v, m)];
        match self.family {
            ModelFamily::EmbMlp => {
                out.push(("w1".into(), m, f));
                out.push(("w2".into(), f, v));
            }
            ModelFamily::OneLayerTheory => {
                for (n, r, c) in [
                    ("wq", m, k),
                    ("wk", m, k),
                    ("wv", m, k),
                    ("wo", k, m),
                    ("wf1", m, f),
                    ("wf2", f, m),
                ] {
                    out.push((n.into(), r, c));
                }
            }
            ModelFamily::DecoderTransformer => {
                out.push(("pos".into(), self.max_seq_len, m));
                for l in 0..self.n_layers {
                    for (n, r, c) in [
                        ("wq", m, k),
                        ("wk", m, k),
                        ("wv", m, k),
                        ("wo", k, m),
                        ("wf1", m, f),
                        ("wf2", f, m),
                    ] {
                        out.push((format!("layer{l}.{n}"), r, c));
                    }
                    if self.use_layer_norm {
                        for n in ["ln1.gain", "ln1.bias", "ln2.gain", "ln2.bias"] {
                            out.push((format!("layer{l}.{n}"), 1, m));
                        }
                    }
                }
                out.push(("proj".into(), m, v));
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|(_, r, c)| r * c).sum()
    }

    /// Width of the output logits.
    pub fn n_outputs(&self) -> usize {
        match self.family {
            ModelFamily::OneLayerTheory => self.d_m,
            _ => self.d_vob,
        }
    }
}

/// Named parameters plus the config that shaped them.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheckpoint {
    pub config: ModelConfig,
    pub params: IndexMap<String, Tensor>,
    pub epoch: usize,
}

impl ModelCheckpoint {
    /// Fresh initialization; each matrix draws from its own named stream of
    /// `config.seed`, so adding a parameter never perturbs the others.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut params = IndexMap::new();
        for (name, rows, cols) in config.param_shapes() {
            let t = if name.ends_with(".gain") {
                Tensor::filled(rows, cols, 1.0)
            } else if name.ends_with(".bias") {
                Tensor::zeros(rows, cols)
            } else {
                init_matrix(
                    rows,
                    cols,
                    config.gamma,
                    &mut rng::named_stream(config.seed, &name),
                )?
            };
            params.insert(name, t);
        }
        Ok(Self {
            config: config.clone(),
            params,
            epoch: 0,
        })
    }

    pub fn param(&self, name: &str) -> Result<&Tensor> {
        self.params.get(name).ok_or_else(|| ModelError::Param {
            name: name.to_string(),
            msg: "no such parameter".into(),
        })
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params.get_mut(name).ok_or_else(|| ModelError::Param {
            name: name.to_string(),
            msg: "no such parameter".into(),
        })
    }

    /// Checks names and shapes against the config.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let shapes = self.config.param_shapes();
        for (name, rows, cols) in &shapes {
            let t = self.params.get(name).ok_or_else(|| ModelError::Param {
                name: name.clone(),
                msg: "missing".into(),
            })?;
            if t.shape() != (*rows, *cols) {
                return Err(ModelError::Param {
                    name: name.clone(),
                    msg: format!("shape {:?}, config expects ({rows}, {cols})", t.shape()),
                });
            }
        }
        if let Some(extra) = self
            .params
            .keys()
            .find(|k| !shapes.iter().any(|(n, _, _)| n == *k))
        {
            return Err(ModelError::Param {
                name: extra.clone(),
                msg: "not part of this config".into(),
            });
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.params.values_mut().for_each(Tensor::zero_grad);
    }

    pub fn clear_grads(&mut self) {
        self.params.values_mut().for_each(Tensor::clear_grad);
    }

    /// NaN barrier over all parameters.
    pub fn check_finite(&self) -> Result<()> {
        for (name, t) in &self.params {
            t.check_finite(name)?;
        }
        Ok(())
    }
}
