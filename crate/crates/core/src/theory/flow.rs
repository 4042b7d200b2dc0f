//! Leading-order embedding and value-projection flows at small
//! initialization.
//!
//! Matrices follow the models' row-vector convention (`y = x W`), so the
//! `d_m x d_m` compositions are `W_f = wf1 wf2` and `W_VO = wv wo`. The
//! returned vectors are flow directions, i.e. minus the gradient.

use super::{global_label_law, label_distribution, token_ratio, Result, Role, TheoryError};
use crate::models::{ModelCheckpoint, ModelFamily};
use crate::tasks::{Sample, TaskSpec, Token};
use crate::tensor::Tensor;

fn centred(probs: &[f64], width: usize) -> Vec<f64> {
    let u = 1.0 / width as f64;
    probs.iter().map(|p| p - u).collect()
}

fn vec_times(v: &[f64], m: &Tensor) -> Result<Vec<f64>> {
    if v.len() != m.rows() {
        return Err(TheoryError::Dimension(format!(
            "vector of length {} against a {}x{} matrix",
            v.len(),
            m.rows(),
            m.cols()
        )));
    }
    Ok(Tensor::row_vector(v.to_vec()).matmul(m)?.into_data())
}

/// `r_s (P^s - 1/d_vob) W2^T W1^T` for an Emb-MLP with `w1: d_m x d_f` and
/// `w2: d_f x d_vob`.
pub fn embmlp_flow_prediction(
    spec: &TaskSpec,
    s: Token,
    role: Role,
    w1: &Tensor,
    w2: &Tensor,
) -> Result<Vec<f64>> {
    if w2.cols() != spec.vocab_size || w1.cols() != w2.rows() {
        return Err(TheoryError::Dimension(format!(
            "w1 {:?} and w2 {:?} do not chain into a vocabulary of {}",
            w1.shape(),
            w2.shape(),
            spec.vocab_size
        )));
    }
    let law = label_distribution(spec, s, role)?;
    let r = token_ratio(spec, s, role)?;
    let g = centred(&law.probs, spec.vocab_size);
    let h = vec_times(&g, &w2.transpose())?;
    let out = vec_times(&h, &w1.transpose())?;
    Ok(out.into_iter().map(|x| r * x).collect())
}

/// `(r_s / L) (P^s - 1/d_m) (W_f^T + I)(W_VO^T + I)` for the one-layer model.
/// Labels are read as `d_m`-dimensional targets, so the vocabulary must
/// match the model width.
pub fn transformer_flow_prediction(
    spec: &TaskSpec,
    s: Token,
    role: Role,
    wf: &Tensor,
    wvo: &Tensor,
) -> Result<Vec<f64>> {
    let d_m = wf.rows();
    if spec.vocab_size != d_m {
        return Err(TheoryError::Dimension(format!(
            "vocabulary {} differs from model width {d_m}",
            spec.vocab_size
        )));
    }
    if wf.shape() != (d_m, d_m) || wvo.shape() != (d_m, d_m) {
        return Err(TheoryError::Dimension(format!(
            "expected {d_m}x{d_m} maps, got {:?} and {:?}",
            wf.shape(),
            wvo.shape()
        )));
    }
    let law = label_distribution(spec, s, role)?;
    let scale = token_ratio(spec, s, role)? / spec.seq_len as f64;
    let eye = Tensor::identity(d_m);
    let g = centred(&law.probs, d_m);
    let h = vec_times(&g, &wf.transpose().add(&eye)?)?;
    let out = vec_times(&h, &wvo.transpose().add(&eye)?)?;
    Ok(out.into_iter().map(|x| scale * x).collect())
}

#[derive(Clone, Debug)]
pub struct WvFlow {
    /// `d_m x d_k` flow direction for the value projection.
    pub direction: Tensor,
    /// Whether the key set is as wide as the model, the setting the
    /// derivation assumes. Reported rather than enforced because a
    /// vocabulary of width `d_m` cannot hold both the keys and their sums.
    pub keys_span_width: bool,
}

/// `1/2 mean(w_emb over reasoning anchors)^T (E[Y] - 1/d_m) (W_O (W_f + I))^T`.
/// `wemb: d_vob x d_m`, `wo: d_k x d_m`, `wf: d_m x d_m`.
pub fn wv_flow_prediction(
    spec: &TaskSpec,
    wemb: &Tensor,
    wo: &Tensor,
    wf: &Tensor,
) -> Result<WvFlow> {
    let d_m = wemb.cols();
    if spec.vocab_size != d_m || wemb.rows() != d_m {
        return Err(TheoryError::Dimension(format!(
            "embedding {:?} must be square with the vocabulary {}",
            wemb.shape(),
            spec.vocab_size
        )));
    }
    if wo.cols() != d_m || wf.shape() != (d_m, d_m) {
        return Err(TheoryError::Dimension(format!(
            "wo {:?} or wf {:?} does not match width {d_m}",
            wo.shape(),
            wf.shape()
        )));
    }
    let mut mean = vec![0.0; d_m];
    let anchors = spec.rsn_anchor_range;
    for a in anchors.iter() {
        for (m, x) in mean.iter_mut().zip(wemb.row(a as usize)) {
            *m += x / anchors.len() as f64;
        }
    }
    let label = centred(&global_label_law(spec)?, d_m);
    let back = wo.matmul(&wf.add(&Tensor::identity(d_m))?)?.transpose();
    let right = vec_times(&label, &back)?;
    let d_k = right.len();
    let mut data = Vec::with_capacity(d_m * d_k);
    for m in &mean {
        data.extend(right.iter().map(|r| 0.5 * m * r));
    }
    Ok(WvFlow {
        direction: Tensor::from_vec(d_m, d_k, data)?,
        keys_span_width: spec.key_range.len() == d_m,
    })
}

/// Exact gradient of the mean cross-entropy of the one-layer model with
/// respect to `wv`, written out by hand:
/// `mean_i xbar_i^T (g_i + ((g_i wf2^T) .* s'(H_i)) wf1^T) wo^T`, where
/// `xbar_i` is the attention-weighted embedding row, `H_i` the pre-activation
/// and `g_i = softmax(f_i) - y_i`. The activation derivative sits on the
/// hidden units, between `wf2^T` and `wf1^T`.
pub fn one_layer_wv_gradient(ckpt: &ModelCheckpoint, samples: &[Sample]) -> Result<Tensor> {
    let c = &ckpt.config;
    if c.family != ModelFamily::OneLayerTheory {
        return Err(TheoryError::Unsupported(format!(
            "{} is not the one-layer model",
            c.family.name()
        )));
    }
    let p = |n: &str| {
        ckpt.param(n)
            .map_err(|e| TheoryError::Unsupported(e.to_string()))
    };
    let (emb, wq, wk, wv, wo, wf1, wf2) = (
        p("emb")?,
        p("wq")?,
        p("wk")?,
        p("wv")?,
        p("wo")?,
        p("wf1")?,
        p("wf2")?,
    );
    let kind = c.activation.kind;
    let scale = 1.0 / (c.d_k as f64).sqrt();
    let (wo_t, wf1_t, wf2_t) = (wo.transpose(), wf1.transpose(), wf2.transpose());
    let mut grad = Tensor::zeros(c.d_m, c.d_k);
    for s in samples {
        let idx: Vec<usize> = s.tokens.iter().map(|&t| t as usize).collect();
        if let Some(&bad) = idx.iter().find(|&&t| t >= emb.rows()) {
            return Err(TheoryError::Sequence(format!(
                "token {bad} outside the embedding table"
            )));
        }
        let x_last = Tensor::row_vector(emb.row(*idx.last().expect("non-empty sequence")).to_vec());
        let q = x_last.matmul(wq)?;
        let scores: Vec<f64> = idx
            .iter()
            .map(|&t| {
                let k = Tensor::row_vector(emb.row(t).to_vec()).matmul(wk)?;
                Ok(scale
                    * q.data()
                        .iter()
                        .zip(k.data())
                        .map(|(a, b)| a * b)
                        .sum::<f64>())
            })
            .collect::<Result<_>>()?;
        let attn = softmax(&scores);
        let mut xbar = vec![0.0; c.d_m];
        for (&t, a) in idx.iter().zip(&attn) {
            for (x, e) in xbar.iter_mut().zip(emb.row(t)) {
                *x += a * e;
            }
        }
        let xbar = Tensor::row_vector(xbar);
        let h = xbar.matmul(wv)?.matmul(wo)?.add(&x_last)?;
        let pre = h.matmul(wf1)?;
        let act: Vec<f64> = pre.data().iter().map(|&x| kind.apply(x)).collect();
        let f = Tensor::row_vector(act.clone()).matmul(wf2)?.add(&h)?;
        let mut g = softmax(f.data());
        let y = s.label as usize;
        if y >= g.len() {
            return Err(TheoryError::Sequence(format!(
                "label {y} outside {} outputs",
                g.len()
            )));
        }
        g[y] -= 1.0;
        let g = Tensor::row_vector(g);
        let back = g.matmul(&wf2_t)?;
        let gated: Vec<f64> = back
            .data()
            .iter()
            .zip(pre.data().iter().zip(&act))
            .map(|(b, (&x, &y))| b * kind.derivative(x, y))
            .collect();
        let dh = g.add(&Tensor::row_vector(gated).matmul(&wf1_t)?)?;
        let right = dh.matmul(&wo_t)?;
        grad = grad.add(&xbar.transpose().matmul(&right)?)?;
    }
    Ok(grad.scale(1.0 / samples.len().max(1) as f64))
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}
