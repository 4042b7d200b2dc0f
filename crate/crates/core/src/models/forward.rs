//! Forward passes. Each builds onto a caller-supplied [`Graph`] so the
//! training loop can run backward on the same tape.
//!
//! Token batches are flat: `tokens.len() = batch * seq_len`, row-major by
//! sequence.

use indexmap::IndexMap;

use super::{ModelCheckpoint, ModelError, ModelFamily, Result};
use crate::tasks::Token;
use crate::tensor::{Graph, Tensor, Var};

/// How the one-layer model's attention row is formed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionMode {
    Learned,
    /// The last row is replaced by the exact average `1/L` over positions.
    Average,
}

/// Logits for the last position of every sequence plus the tape handles of
/// the parameters that produced them.
#[derive(Debug)]
pub struct ForwardOutput {
    pub logits: Var,
    pub params: IndexMap<String, Var>,
}

/// Per-layer, per-head attention internals for every position.
#[derive(Clone, Debug, Default)]
pub struct DecoderTrace {
    /// Scaled pre-softmax scores before masking, `(batch * L) x L`.
    pub scores: Vec<Vec<Tensor>>,
    /// Row-stochastic attention after masking and softmax.
    pub attention: Vec<Vec<Tensor>>,
}

fn last_indices(batch: usize, seq_len: usize) -> Vec<usize> {
    (0..batch).map(|b| b * seq_len + seq_len - 1).collect()
}

impl ModelCheckpoint {
    fn check_tokens(&self, tokens: &[Token], seq_len: usize) -> Result<usize> {
        if seq_len == 0 || tokens.len() % seq_len != 0 || tokens.is_empty() {
            return Err(ModelError::Config(format!(
                "{} tokens do not form sequences of length {seq_len}",
                tokens.len()
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.config.d_vob) {
            return Err(ModelError::TokenOutOfRange {
                token: t,
                vocab: self.config.d_vob,
            });
        }
        Ok(tokens.len() / seq_len)
    }

    fn bind(&self, g: &mut Graph, trainable: bool) -> IndexMap<String, Var> {
        self.params
            .iter()
            .map(|(n, t)| {
                let v = if trainable {
                    g.param(t)
                } else {
                    g.constant(t.value_clone())
                };
                (n.clone(), v)
            })
            .collect()
    }

    fn expect(&self, family: ModelFamily) -> Result<()> {
        if self.config.family != family {
            return Err(ModelError::WrongFamily {
                expected: family,
                found: self.config.family,
            });
        }
        Ok(())
    }

    /// Last-position logits on a fresh binding of the parameters.
    /// `trainable = false` binds them as constants (cheaper, no gradients).
    pub fn forward(
        &self,
        g: &mut Graph,
        tokens: &[Token],
        seq_len: usize,
        trainable: bool,
    ) -> Result<ForwardOutput> {
        let p = self.bind(g, trainable);
        let logits = match self.config.family {
            ModelFamily::EmbMlp => self.emb_mlp(g, &p, tokens, seq_len)?,
            ModelFamily::OneLayerTheory => {
                self.one_layer(g, &p, tokens, seq_len, AttentionMode::Learned)?
            }
            ModelFamily::DecoderTransformer => self.decoder(g, &p, tokens, seq_len, None)?,
        };
        Ok(ForwardOutput { logits, params: p })
    }

    /// Evaluation-only logits, `batch x n_outputs`.
    pub fn logits(&self, tokens: &[Token], seq_len: usize) -> Result<Tensor> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, tokens, seq_len, false)?;
        Ok(g.value(out.logits).clone())
    }

    /// `s(sum_t emb_t W1) W2` with sum pooling over the sequence.
    pub fn emb_mlp_logits(&self, tokens: &[Token], seq_len: usize) -> Result<Tensor> {
        self.expect(ModelFamily::EmbMlp)?;
        self.logits(tokens, seq_len)
    }

    fn emb_mlp(
        &self,
        g: &mut Graph,
        p: &IndexMap<String, Var>,
        tokens: &[Token],
        seq_len: usize,
    ) -> Result<Var> {
        self.check_tokens(tokens, seq_len)?;
        let idx: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let e = g.rows(p["emb"], &idx)?;
        let pooled = g.segment_sum(e, seq_len)?;
        let h = g.matmul(pooled, p["w1"])?;
        let h = g.activation(h, self.config.activation.kind);
        Ok(g.matmul(h, p["w2"])?)
    }

    /// One-layer model output (a `d_m`-vector per sequence), optionally with
    /// the attention row swapped for the exact average.
    pub fn one_layer_output(
        &self,
        tokens: &[Token],
        seq_len: usize,
        mode: AttentionMode,
    ) -> Result<Tensor> {
        self.expect(ModelFamily::OneLayerTheory)?;
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let out = self.one_layer(&mut g, &p, tokens, seq_len, mode)?;
        Ok(g.value(out).clone())
    }

    fn one_layer(
        &self,
        g: &mut Graph,
        p: &IndexMap<String, Var>,
        tokens: &[Token],
        seq_len: usize,
        mode: AttentionMode,
    ) -> Result<Var> {
        let batch = self.check_tokens(tokens, seq_len)?;
        let idx: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let x = g.rows(p["emb"], &idx)?;
        let x_last = g.rows(x, &last_indices(batch, seq_len))?;
        let attn = match mode {
            AttentionMode::Learned => {
                let q = g.matmul(x_last, p["wq"])?;
                let k = g.matmul(x, p["wk"])?;
                let s = g.block_matmul_nt(q, k, 1, seq_len)?;
                let s = g.scale(s, 1.0 / (self.config.d_k as f64).sqrt());
                g.row_softmax(s)?
            }
            AttentionMode::Average => {
                g.constant(Tensor::filled(batch, seq_len, 1.0 / seq_len as f64))
            }
        };
        let avg = g.block_matmul(attn, x, 1, seq_len)?;
        let v = g.matmul(avg, p["wv"])?;
        let o = g.matmul(v, p["wo"])?;
        let h = g.add(o, x_last)?;
        let f = g.matmul(h, p["wf1"])?;
        let f = g.activation(f, self.config.activation.kind);
        let f = g.matmul(f, p["wf2"])?;
        Ok(g.add(f, h)?)
    }

    /// Decoder logits for every position's last token plus the attention
    /// internals of every layer. Slower than [`ModelCheckpoint::forward`]
    /// since the last layer is evaluated at all positions.
    pub fn decoder_trace(
        &self,
        tokens: &[Token],
        seq_len: usize,
    ) -> Result<(Tensor, DecoderTrace)> {
        self.expect(ModelFamily::DecoderTransformer)?;
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let mut trace = DecoderTrace::default();
        let logits = self.decoder(&mut g, &p, tokens, seq_len, Some(&mut trace))?;
        Ok((g.value(logits).clone(), trace))
    }

    /// Logits at every position, `(batch * L) x d_vob`.
    pub fn decoder_all_positions(&self, tokens: &[Token], seq_len: usize) -> Result<Tensor> {
        self.expect(ModelFamily::DecoderTransformer)?;
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let mut trace = DecoderTrace::default();
        let x = self.decoder_body(&mut g, &p, tokens, seq_len, Some(&mut trace))?;
        let out = g.matmul(x, p["proj"])?;
        Ok(g.value(out).clone())
    }

    fn decoder(
        &self,
        g: &mut Graph,
        p: &IndexMap<String, Var>,
        tokens: &[Token],
        seq_len: usize,
        trace: Option<&mut DecoderTrace>,
    ) -> Result<Var> {
        let batch = tokens.len() / seq_len.max(1);
        let full = trace.is_some();
        let x = self.decoder_body(g, p, tokens, seq_len, trace)?;
        let x = if full {
            g.rows(x, &last_indices(batch, seq_len))?
        } else {
            x
        };
        Ok(g.matmul(x, p["proj"])?)
    }

    /// Runs all layers. With a trace every position is kept; without one the
    /// last layer only computes the final position of each sequence.
    fn decoder_body(
        &self,
        g: &mut Graph,
        p: &IndexMap<String, Var>,
        tokens: &[Token],
        seq_len: usize,
        mut trace: Option<&mut DecoderTrace>,
    ) -> Result<Var> {
        let cfg = &self.config;
        let batch = self.check_tokens(tokens, seq_len)?;
        if seq_len > cfg.max_seq_len {
            return Err(ModelError::SeqTooLong {
                len: seq_len,
                max: cfg.max_seq_len,
            });
        }
        let idx: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let e = g.rows(p["emb"], &idx)?;
        let pos = if seq_len == cfg.max_seq_len {
            p["pos"]
        } else {
            g.rows(p["pos"], &(0..seq_len).collect::<Vec<_>>())?
        };
        let mut x = g.add_broadcast(e, pos)?;
        let head = cfg.d_k / cfg.n_heads;
        let inv_sqrt = 1.0 / (head as f64).sqrt();
        let last = last_indices(batch, seq_len);

        for l in 0..cfg.n_layers {
            let w = |n: &str| p[&format!("layer{l}.{n}")];
            let only_last = l + 1 == cfg.n_layers && trace.is_none();
            let (x_q, q_block) = if only_last {
                (g.rows(x, &last)?, 1)
            } else {
                (x, seq_len)
            };
            let q = g.matmul(x_q, w("wq"))?;
            let k = g.matmul(x, w("wk"))?;
            let v = g.matmul(x, w("wv"))?;
            let mut heads = Vec::with_capacity(cfg.n_heads);
            let mut layer_scores = Vec::new();
            let mut layer_attn = Vec::new();
            for h in 0..cfg.n_heads {
                let (qh, kh, vh) = if cfg.n_heads == 1 {
                    (q, k, v)
                } else {
                    (
                        g.col_slice(q, h * head, head)?,
                        g.col_slice(k, h * head, head)?,
                        g.col_slice(v, h * head, head)?,
                    )
                };
                let s = g.block_matmul_nt(qh, kh, q_block, seq_len)?;
                let s = g.scale(s, inv_sqrt);
                // A lone final query may see every position, so it needs no mask.
                let masked = if only_last { s } else { g.causal_mask(s)? };
                let a = g.row_softmax(masked)?;
                if trace.is_some() {
                    layer_scores.push(g.value(s).clone());
                    layer_attn.push(g.value(a).clone());
                }
                heads.push(g.block_matmul(a, vh, q_block, seq_len)?);
            }
            if let Some(t) = trace.as_deref_mut() {
                t.scores.push(layer_scores);
                t.attention.push(layer_attn);
            }
            let o = if heads.len() == 1 {
                heads[0]
            } else {
                g.concat_cols(&heads)?
            };
            let o = g.matmul(o, w("wo"))?;
            let h1 = g.add(x_q, o)?;
            let h1 = self.layer_norm(g, p, h1, l, 1)?;
            let f = g.matmul(h1, w("wf1"))?;
            let f = g.activation(f, cfg.activation.kind);
            let f = g.matmul(f, w("wf2"))?;
            let h2 = g.add(f, h1)?;
            x = self.layer_norm(g, p, h2, l, 2)?;
        }
        Ok(x)
    }

    fn layer_norm(
        &self,
        g: &mut Graph,
        p: &IndexMap<String, Var>,
        x: Var,
        layer: usize,
        which: u8,
    ) -> Result<Var> {
        if !self.config.use_layer_norm {
            return Ok(x);
        }
        let n = g.layer_norm(x, self.config.ln_eps);
        let n = g.mul_broadcast(n, p[&format!("layer{layer}.ln{which}.gain")])?;
        Ok(g.add_broadcast(n, p[&format!("layer{layer}.ln{which}.bias")])?)
    }
}
