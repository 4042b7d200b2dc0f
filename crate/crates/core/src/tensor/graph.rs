//! The autodiff tape.

use super::{gemm, ActivationKind, MatRef, Result, Tensor, TensorError};

/// Handle to a node on a [`Graph`]. Only meaningful for the graph that made it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `b` is tiled down the rows of `a` (`b.rows` divides `a.rows`).
    AddBroadcast(Var, Var),
    MulBroadcast(Var, Var),
    Scale(Var, f64),
    Activation(Var, ActivationKind),
    RowSoftmax(Var),
    /// Row `r` is query position `r % cols`; later columns are masked.
    CausalMask(Var),
    /// Stores the normalized rows and per-row `1/std`.
    LayerNorm {
        input: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Rows(Var, Vec<usize>),
    SegmentSum(Var, usize),
    ColSlice(Var, usize),
    ConcatCols(Vec<Var>),
    BlockMatMulNT {
        a: Var,
        b: Var,
        block_a: usize,
        block_b: usize,
    },
    BlockMatMul {
        a: Var,
        b: Var,
        block_a: usize,
        block_b: usize,
    },
    SumAll(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode tape. Build with the op methods, then call [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Leaf gradients produced by one backward pass.
#[derive(Debug)]
pub struct Gradients {
    shapes: Vec<(usize, usize)>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// `None` when `v` does not influence the loss or is a constant.
    pub fn get(&self, v: Var) -> Option<Tensor> {
        let (r, c) = self.shapes[v.0];
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::from_vec(r, c, g.clone()).expect("gradient shape"))
    }

    /// Same as [`Gradients::get`] but zeros instead of `None`.
    pub fn get_or_zero(&self, v: Var) -> Tensor {
        let (r, c) = self.shapes[v.0];
        self.get(v).unwrap_or_else(|| Tensor::zeros(r, c))
    }

    /// Adds the gradient of `v` into `target`'s accumulator.
    pub fn accumulate_into(&self, v: Var, target: &mut Tensor) -> Result<()> {
        if self.shapes[v.0] != target.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "accumulate_into",
                left: self.shapes[v.0],
                right: target.shape(),
            });
        }
        match &self.grads[v.0] {
            Some(g) => target.accumulate_grad(g),
            None => target.accumulate_grad(&vec![0.0; target.len()]),
        }
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: a.shape(),
        right: b.shape(),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf. The value is copied onto the tape.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(t.value_clone(), Op::Leaf, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// NaN barrier: fails with `name` if `v` holds a non-finite entry.
    pub fn check_finite(&self, v: Var, name: &str) -> Result<()> {
        self.value(v).check_finite(name)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.rows() {
            return Err(mismatch("matmul", ta, tb));
        }
        let out = ta.matmul(tb)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(out, Op::Transpose(a), rg)
    }

    fn zip_same(
        &mut self,
        a: Var,
        b: Var,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(op, ta, tb));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        Tensor::from_vec(ta.rows(), ta.cols(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    fn broadcast(
        &mut self,
        a: Var,
        b: Var,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if tb.cols() != ta.cols() || tb.rows() == 0 || ta.rows() % tb.rows() != 0 {
            return Err(mismatch(op, ta, tb));
        }
        let (cols, br) = (ta.cols(), tb.rows());
        let mut out = ta.clone();
        for r in 0..ta.rows() {
            let brow = tb.row(r % br);
            for (x, y) in out.data_mut()[r * cols..(r + 1) * cols]
                .iter_mut()
                .zip(brow)
            {
                *x = f(*x, *y);
            }
        }
        Ok(out)
    }

    /// `a + b` with `b`'s rows repeated down `a` (position tables, biases).
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast(a, b, "add_broadcast", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::AddBroadcast(a, b), rg))
    }

    pub fn mul_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast(a, b, "mul_broadcast", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MulBroadcast(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).scale(c);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn activation(&mut self, a: Var, kind: ActivationKind) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| kind.apply(x)).collect();
        let out = Tensor::from_vec(t.rows(), t.cols(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(out, Op::Activation(a, kind), rg)
    }

    /// Softmax along each row. `-inf` entries get exactly zero mass.
    pub fn row_softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let cols = t.cols();
        let mut out = t.clone();
        for (r, row) in out.data_mut().chunks_mut(cols.max(1)).enumerate() {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if m == f64::NEG_INFINITY {
                return Err(TensorError::AllMaskedRow { row: r });
            }
            let mut s = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                s += *x;
            }
            row.iter_mut().for_each(|x| *x /= s);
        }
        let rg = self.rg(a);
        Ok(self.push(out, Op::RowSoftmax(a), rg))
    }

    /// Sets entries above the diagonal to `-inf`, treating row `r` as query
    /// position `r % cols`. Stacked per-sequence score blocks of shape
    /// `seq_len x seq_len` therefore mask correctly in one call.
    pub fn causal_mask(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let cols = t.cols();
        if cols == 0 || t.rows() % cols != 0 {
            return Err(TensorError::Invalid(format!(
                "causal_mask needs rows to be a multiple of cols, got {:?}",
                t.shape()
            )));
        }
        let mut out = t.clone();
        for r in 0..t.rows() {
            let i = r % cols;
            out.row_mut(r)[i + 1..]
                .iter_mut()
                .for_each(|x| *x = f64::NEG_INFINITY);
        }
        let rg = self.rg(a);
        Ok(self.push(out, Op::CausalMask(a), rg))
    }

    /// Row-wise `(x - mean) / sqrt(var + eps)` with the biased variance. No
    /// affine part; compose with the broadcast ops for gain and bias.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let t = self.value(a);
        let cols = t.cols();
        let mut xhat = t.data().to_vec();
        let mut inv_std = Vec::with_capacity(t.rows());
        for row in xhat.chunks_mut(cols.max(1)) {
            let n = cols as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|x| *x = (*x - mean) * is);
            inv_std.push(is);
        }
        let out = Tensor::from_vec(t.rows(), cols, xhat.clone()).expect("same shape");
        let rg = self.rg(a);
        self.push(
            out,
            Op::LayerNorm {
                input: a,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// Mean over rows of `-log softmax(logits_r)[labels_r]`; a 1x1 result.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (n, c) = t.shape();
        if labels.len() != n || n == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                left: t.shape(),
                right: (labels.len(), 1),
            });
        }
        let mut probs = t.data().to_vec();
        let mut loss = 0.0;
        for (r, row) in probs.chunks_mut(c).enumerate() {
            let y = labels[r];
            if y >= c {
                return Err(TensorError::LabelOutOfRange {
                    label: y,
                    classes: c,
                });
            }
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = row.iter().map(|x| (x - m).exp()).sum();
            let lse = m + s.ln();
            loss += lse - row[y];
            row.iter_mut().for_each(|x| *x = (*x - lse).exp());
        }
        let out = Tensor::scalar(loss / n as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Row gather: output row `k` is row `indices[k]` of `a`. Serves as the
    /// embedding lookup and as last-position selection.
    pub fn rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let cols = t.cols();
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            if i >= t.rows() {
                return Err(TensorError::IndexOutOfRange {
                    index: i,
                    len: t.rows(),
                });
            }
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::from_vec(indices.len(), cols, data)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Rows(a, indices.to_vec()), rg))
    }

    /// Sums consecutive groups of `seg` rows.
    pub fn segment_sum(&mut self, a: Var, seg: usize) -> Result<Var> {
        let t = self.value(a);
        if seg == 0 || t.rows() % seg != 0 {
            return Err(TensorError::Invalid(format!(
                "segment_sum: {} rows not divisible by {seg}",
                t.rows()
            )));
        }
        let cols = t.cols();
        let mut out = Tensor::zeros(t.rows() / seg, cols);
        for r in 0..t.rows() {
            let src = t.row(r);
            out.row_mut(r / seg)
                .iter_mut()
                .zip(src)
                .for_each(|(o, x)| *o += x);
        }
        let rg = self.rg(a);
        Ok(self.push(out, Op::SegmentSum(a, seg), rg))
    }

    pub fn col_slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        if start + len > t.cols() {
            return Err(TensorError::Invalid(format!(
                "col_slice {start}..{} of {} columns",
                start + len,
                t.cols()
            )));
        }
        let mut data = Vec::with_capacity(t.rows() * len);
        for r in 0..t.rows() {
            data.extend_from_slice(&t.row(r)[start..start + len]);
        }
        let out = Tensor::from_vec(t.rows(), len, data)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::ColSlice(a, start), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Invalid("concat_cols of nothing".into()))?;
        let rows = self.value(*first).rows();
        for p in parts {
            if self.value(*p).rows() != rows {
                return Err(mismatch("concat_cols", self.value(*first), self.value(*p)));
            }
        }
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(r));
            }
        }
        let out = Tensor::from_vec(rows, cols, data)?;
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    fn block_count(
        &self,
        a: Var,
        b: Var,
        block_a: usize,
        block_b: usize,
        op: &'static str,
    ) -> Result<usize> {
        let (ta, tb) = (self.value(a), self.value(b));
        if block_a == 0 || block_b == 0 || ta.rows() % block_a != 0 || tb.rows() % block_b != 0 {
            return Err(mismatch(op, ta, tb));
        }
        let n = ta.rows() / block_a;
        if tb.rows() / block_b != n {
            return Err(mismatch(op, ta, tb));
        }
        Ok(n)
    }

    /// Per-block `a_k b_k^T`, where `a_k` is the `k`th group of `block_a`
    /// rows of `a` and `b_k` the `k`th group of `block_b` rows of `b`.
    /// Output is `(n * block_a) x block_b`. Attention scores per sequence.
    pub fn block_matmul_nt(
        &mut self,
        a: Var,
        b: Var,
        block_a: usize,
        block_b: usize,
    ) -> Result<Var> {
        let n = self.block_count(a, b, block_a, block_b, "block_matmul_nt")?;
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.cols() {
            return Err(mismatch("block_matmul_nt", ta, tb));
        }
        let d = ta.cols();
        let mut out = Tensor::zeros(n * block_a, block_b);
        for k in 0..n {
            let av = MatRef::new(&ta.data()[k * block_a * d..], block_a, d);
            let bv = MatRef::new(&tb.data()[k * block_b * d..], block_b, d);
            gemm(
                1.0,
                av,
                bv.t(),
                0.0,
                &mut out.data_mut()[k * block_a * block_b..],
            );
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            out,
            Op::BlockMatMulNT {
                a,
                b,
                block_a,
                block_b,
            },
            rg,
        ))
    }

    /// Per-block `a_k b_k` with `a_k` of shape `block_a x block_b`.
    /// Output is `(n * block_a) x b.cols`. Attention-weighted values.
    pub fn block_matmul(&mut self, a: Var, b: Var, block_a: usize, block_b: usize) -> Result<Var> {
        let n = self.block_count(a, b, block_a, block_b, "block_matmul")?;
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != block_b {
            return Err(mismatch("block_matmul", ta, tb));
        }
        let d = tb.cols();
        let mut out = Tensor::zeros(n * block_a, d);
        for k in 0..n {
            let av = MatRef::new(&ta.data()[k * block_a * block_b..], block_a, block_b);
            let bv = MatRef::new(&tb.data()[k * block_b * d..], block_b, d);
            gemm(1.0, av, bv, 0.0, &mut out.data_mut()[k * block_a * d..]);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            out,
            Op::BlockMatMul {
                a,
                b,
                block_a,
                block_b,
            },
            rg,
        ))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    /// Reverse sweep from a 1x1 `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(TensorError::NonScalarLoss(shape));
        }
        let shapes: Vec<_> = self.nodes.iter().map(|n| n.value.shape()).collect();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[id] = Some(g);
        }

        // Only leaves that asked for gradients are reported.
        for (i, n) in self.nodes.iter().enumerate() {
            if !(matches!(n.op, Op::Leaf) && n.requires_grad) {
                grads[i] = None;
            }
        }
        Ok(Gradients { shapes, grads })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let out = &node.value;
        let (rows, cols) = out.shape();

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let gv = MatRef::new(g, rows, cols);
                if wants(*a) {
                    let buf = slot(grads, *a, ta.len());
                    gemm(
                        1.0,
                        gv,
                        MatRef::new(tb.data(), tb.rows(), tb.cols()).t(),
                        1.0,
                        buf,
                    );
                }
                if wants(*b) {
                    let buf = slot(grads, *b, tb.len());
                    gemm(
                        1.0,
                        MatRef::new(ta.data(), ta.rows(), ta.cols()).t(),
                        gv,
                        1.0,
                        buf,
                    );
                }
            }
            Op::Transpose(a) => {
                let buf = slot(grads, *a, g.len());
                // out is cols_a x rows_a; input index (c, r) <- out (r, c).
                for r in 0..rows {
                    for c in 0..cols {
                        buf[c * rows + r] += g[r * cols + c];
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if wants(v) {
                        add_into(slot(grads, v, g.len()), g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    add_into(slot(grads, *a, g.len()), g);
                }
                if wants(*b) {
                    let buf = slot(grads, *b, g.len());
                    buf.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                if wants(*a) {
                    let buf = slot(grads, *a, g.len());
                    for i in 0..g.len() {
                        buf[i] += g[i] * tb.data()[i];
                    }
                }
                if wants(*b) {
                    let buf = slot(grads, *b, g.len());
                    for i in 0..g.len() {
                        buf[i] += g[i] * ta.data()[i];
                    }
                }
            }
            Op::AddBroadcast(a, b) => {
                if wants(*a) {
                    add_into(slot(grads, *a, g.len()), g);
                }
                if wants(*b) {
                    let tb = val(*b);
                    let br = tb.rows();
                    let buf = slot(grads, *b, tb.len());
                    for r in 0..rows {
                        let dst = &mut buf[(r % br) * cols..(r % br + 1) * cols];
                        add_into(dst, &g[r * cols..(r + 1) * cols]);
                    }
                }
            }
            Op::MulBroadcast(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let br = tb.rows();
                if wants(*a) {
                    let buf = slot(grads, *a, g.len());
                    for r in 0..rows {
                        let brow = tb.row(r % br);
                        for c in 0..cols {
                            buf[r * cols + c] += g[r * cols + c] * brow[c];
                        }
                    }
                }
                if wants(*b) {
                    let buf = slot(grads, *b, tb.len());
                    for r in 0..rows {
                        let base = (r % br) * cols;
                        for c in 0..cols {
                            buf[base + c] += g[r * cols + c] * ta.data()[r * cols + c];
                        }
                    }
                }
            }
            Op::Scale(a, c) => {
                let buf = slot(grads, *a, g.len());
                buf.iter_mut().zip(g).for_each(|(x, y)| *x += c * y);
            }
            Op::Activation(a, kind) => {
                let x = val(*a).data();
                let y = out.data();
                let buf = slot(grads, *a, g.len());
                for i in 0..g.len() {
                    buf[i] += g[i] * kind.derivative(x[i], y[i]);
                }
            }
            Op::RowSoftmax(a) => {
                let y = out.data();
                let buf = slot(grads, *a, g.len());
                for r in 0..rows {
                    let (yr, gr) = (&y[r * cols..(r + 1) * cols], &g[r * cols..(r + 1) * cols]);
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for c in 0..cols {
                        buf[r * cols + c] += yr[c] * (gr[c] - dot);
                    }
                }
            }
            Op::CausalMask(a) => {
                let buf = slot(grads, *a, g.len());
                for r in 0..rows {
                    let i = r % cols;
                    add_into(
                        &mut buf[r * cols..r * cols + i + 1],
                        &g[r * cols..r * cols + i + 1],
                    );
                }
            }
            Op::LayerNorm {
                input,
                xhat,
                inv_std,
            } => {
                let buf = slot(grads, *input, g.len());
                let n = cols as f64;
                for r in 0..rows {
                    let (xr, gr) = (
                        &xhat[r * cols..(r + 1) * cols],
                        &g[r * cols..(r + 1) * cols],
                    );
                    let mg = gr.iter().sum::<f64>() / n;
                    let mgx = gr.iter().zip(xr).map(|(p, q)| p * q).sum::<f64>() / n;
                    for c in 0..cols {
                        buf[r * cols + c] += inv_std[r] * (gr[c] - mg - xr[c] * mgx);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let c = val(*logits).cols();
                let n = labels.len() as f64;
                let scale = g[0] / n;
                let buf = slot(grads, *logits, probs.len());
                for (r, &y) in labels.iter().enumerate() {
                    for k in 0..c {
                        let onehot = if k == y { 1.0 } else { 0.0 };
                        buf[r * c + k] += scale * (probs[r * c + k] - onehot);
                    }
                }
            }
            Op::Rows(a, idx) => {
                let buf = slot(grads, *a, val(*a).len());
                for (k, &i) in idx.iter().enumerate() {
                    add_into(
                        &mut buf[i * cols..(i + 1) * cols],
                        &g[k * cols..(k + 1) * cols],
                    );
                }
            }
            Op::SegmentSum(a, seg) => {
                let ta = val(*a);
                let buf = slot(grads, *a, ta.len());
                for r in 0..ta.rows() {
                    let o = r / seg;
                    add_into(
                        &mut buf[r * cols..(r + 1) * cols],
                        &g[o * cols..(o + 1) * cols],
                    );
                }
            }
            Op::ColSlice(a, start) => {
                let ta = val(*a);
                let ac = ta.cols();
                let buf = slot(grads, *a, ta.len());
                for r in 0..rows {
                    add_into(
                        &mut buf[r * ac + start..r * ac + start + cols],
                        &g[r * cols..(r + 1) * cols],
                    );
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let pc = val(*p).cols();
                    if wants(*p) {
                        let buf = slot(grads, *p, rows * pc);
                        for r in 0..rows {
                            add_into(
                                &mut buf[r * pc..(r + 1) * pc],
                                &g[r * cols + off..r * cols + off + pc],
                            );
                        }
                    }
                    off += pc;
                }
            }
            Op::BlockMatMulNT {
                a,
                b,
                block_a,
                block_b,
            } => {
                let (ta, tb) = (val(*a), val(*b));
                let d = ta.cols();
                let n = ta.rows() / block_a;
                if wants(*a) {
                    let buf = slot(grads, *a, ta.len());
                    for k in 0..n {
                        let gk = MatRef::new(&g[k * block_a * block_b..], *block_a, *block_b);
                        let bk = MatRef::new(&tb.data()[k * block_b * d..], *block_b, d);
                        gemm(1.0, gk, bk, 1.0, &mut buf[k * block_a * d..]);
                    }
                }
                if wants(*b) {
                    let buf = slot(grads, *b, tb.len());
                    for k in 0..n {
                        let gk = MatRef::new(&g[k * block_a * block_b..], *block_a, *block_b);
                        let ak = MatRef::new(&ta.data()[k * block_a * d..], *block_a, d);
                        gemm(1.0, gk.t(), ak, 1.0, &mut buf[k * block_b * d..]);
                    }
                }
            }
            Op::BlockMatMul {
                a,
                b,
                block_a,
                block_b,
            } => {
                let (ta, tb) = (val(*a), val(*b));
                let d = tb.cols();
                let n = ta.rows() / block_a;
                if wants(*a) {
                    let buf = slot(grads, *a, ta.len());
                    for k in 0..n {
                        let gk = MatRef::new(&g[k * block_a * d..], *block_a, d);
                        let bk = MatRef::new(&tb.data()[k * block_b * d..], *block_b, d);
                        gemm(1.0, gk, bk.t(), 1.0, &mut buf[k * block_a * block_b..]);
                    }
                }
                if wants(*b) {
                    let buf = slot(grads, *b, tb.len());
                    for k in 0..n {
                        let gk = MatRef::new(&g[k * block_a * d..], *block_a, d);
                        let ak =
                            MatRef::new(&ta.data()[k * block_a * block_b..], *block_a, *block_b);
                        gemm(1.0, ak.t(), gk, 1.0, &mut buf[k * block_b * d..]);
                    }
                }
            }
            Op::SumAll(a) => {
                let buf = slot(grads, *a, val(*a).len());
                buf.iter_mut().for_each(|x| *x += g[0]);
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(x, y)| *x += y);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn rand_tensor(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut r = rng::stream(seed, 99);
        let data = (0..rows * cols)
            .map(|_| r.random_range(-1.0..1.0))
            .collect();
        Tensor::from_vec(rows, cols, data).unwrap()
    }

    /// Central differences of `f` w.r.t. each input, compared to autodiff.
    fn check_grad(inputs: &[Tensor], f: impl Fn(&mut Graph, &[Var]) -> Var) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t)).collect();
        let loss = f(&mut g, &vars);
        let grads = g.backward(loss).unwrap();
        let eval = |ins: &[Tensor]| {
            let mut g = Graph::new();
            let vs: Vec<Var> = ins.iter().map(|t| g.param(t)).collect();
            let l = f(&mut g, &vs);
            g.value(l).data()[0]
        };
        let h = 1e-5;
        for (k, t) in inputs.iter().enumerate() {
            let analytic = grads.get_or_zero(vars[k]);
            for i in 0..t.len() {
                let mut plus = inputs.to_vec();
                plus[k].data_mut()[i] += h;
                let mut minus = inputs.to_vec();
                minus[k].data_mut()[i] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.data()[i];
                let denom = a.abs().max(fd.abs()).max(1e-3);
                assert!(
                    (a - fd).abs() / denom < 1e-6,
                    "input {k} entry {i}: autodiff {a} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn x_dot_x_gradient_is_2x() {
        let x = rand_tensor(5, 1, 1);
        let mut g = Graph::new();
        let v = g.param(&x);
        let xt = g.transpose(v);
        let l = g.matmul(xt, v).unwrap();
        let grads = g.backward(l).unwrap();
        let got = grads.get(v).unwrap();
        for (a, b) in got.data().iter().zip(x.data()) {
            assert!((a - 2.0 * b).abs() < 1e-14);
        }
    }

    #[test]
    fn backward_twice_doubles_accumulated_grads() {
        let x = rand_tensor(3, 2, 2);
        let mut p = x.clone();
        for _ in 0..2 {
            let mut g = Graph::new();
            let v = g.param(&p);
            let sq = g.mul(v, v).unwrap();
            let l = g.sum_all(sq);
            g.backward(l).unwrap().accumulate_into(v, &mut p).unwrap();
        }
        for (a, b) in p.grad().unwrap().iter().zip(x.data()) {
            assert!((a - 4.0 * b).abs() < 1e-14);
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let v = g.param(&Tensor::zeros(2, 2));
        assert_eq!(
            g.backward(v).unwrap_err(),
            TensorError::NonScalarLoss((2, 2))
        );
    }

    #[test]
    fn softmax_rows_and_mask() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(2, 4));
        let s = g.row_softmax(z).unwrap();
        assert!(g.value(s).data().iter().all(|&x| (x - 0.25).abs() < 1e-15));

        let x = g.constant(rand_tensor(8, 4, 3).scale(20.0));
        let m = g.causal_mask(x).unwrap();
        let s = g.row_softmax(m).unwrap();
        let t = g.value(s);
        for r in 0..8 {
            let sum: f64 = t.row(r).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            for c in (r % 4 + 1)..4 {
                assert_eq!(t.get(r, c), 0.0);
            }
        }
    }

    #[test]
    fn all_masked_row_is_an_error() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::filled(1, 3, f64::NEG_INFINITY));
        assert_eq!(
            g.row_softmax(x).unwrap_err(),
            TensorError::AllMaskedRow { row: 0 }
        );
    }

    #[test]
    fn cross_entropy_of_zero_logits_is_log_classes() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(3, 200));
        let l = g.cross_entropy(x, &[0, 17, 199]).unwrap();
        assert!((g.value(l).data()[0] - 200f64.ln()).abs() < 1e-12);
        let y = g.constant(Tensor::zeros(1, 5));
        assert!(g.cross_entropy(y, &[5]).is_err());
    }

    #[test]
    fn layer_norm_moments() {
        let mut g = Graph::new();
        let x = g.constant(rand_tensor(6, 10, 4).scale(3.0));
        let y = g.layer_norm(x, 0.0);
        for r in 0..6 {
            let row = g.value(y).row(r);
            let mean = row.iter().sum::<f64>() / 10.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 10.0;
            assert!(mean.abs() <= 1e-12);
            assert!((var - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn shape_errors_carry_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(2, 3));
        let b = g.constant(Tensor::zeros(2, 2));
        assert_eq!(
            g.add(a, b).unwrap_err(),
            TensorError::ShapeMismatch {
                op: "add",
                left: (2, 3),
                right: (2, 2)
            }
        );
    }

    #[test]
    fn elementwise_and_broadcast_grads() {
        let ins = [
            rand_tensor(4, 3, 5),
            rand_tensor(4, 3, 6),
            rand_tensor(2, 3, 7),
        ];
        check_grad(&ins, |g, v| {
            let m = g.mul(v[0], v[1]).unwrap();
            let s = g.sub(m, v[1]).unwrap();
            let ab = g.add_broadcast(s, v[2]).unwrap();
            let mb = g.mul_broadcast(ab, v[2]).unwrap();
            let t = g.activation(mb, ActivationKind::Tanh);
            let gl = g.activation(t, ActivationKind::Gelu);
            let sc = g.scale(gl, 1.7);
            let a = g.add(sc, v[0]).unwrap();
            let sq = g.mul(a, a).unwrap();
            g.sum_all(sq)
        });
    }

    #[test]
    fn matmul_transpose_softmax_ce_grads() {
        let ins = [rand_tensor(4, 3, 8), rand_tensor(3, 5, 9)];
        check_grad(&ins, |g, v| {
            let m = g.matmul(v[0], v[1]).unwrap();
            let mt = g.transpose(m);
            let back = g.transpose(mt);
            let s = g.row_softmax(back).unwrap();
            let w = g.mul(s, back).unwrap();
            g.cross_entropy(w, &[0, 4, 2, 1]).unwrap()
        });
    }

    #[test]
    fn layer_norm_grad() {
        let ins = [rand_tensor(3, 6, 10), rand_tensor(3, 6, 11)];
        check_grad(&ins, |g, v| {
            let y = g.layer_norm(v[0], 1e-5);
            let w = g.mul(y, v[1]).unwrap();
            let t = g.activation(w, ActivationKind::Tanh);
            g.sum_all(t)
        });
    }

    #[test]
    fn gather_segment_slice_concat_grads() {
        let ins = [rand_tensor(5, 4, 12), rand_tensor(6, 2, 13)];
        check_grad(&ins, |g, v| {
            let e = g.rows(v[0], &[0, 3, 3, 1, 4, 0]).unwrap();
            let s = g.segment_sum(e, 3).unwrap();
            let a = g.col_slice(e, 1, 2).unwrap();
            let b = g.col_slice(e, 0, 1).unwrap();
            let c = g.concat_cols(&[a, v[1], b]).unwrap();
            let t = g.activation(c, ActivationKind::Tanh);
            let last = g.rows(t, &[2, 5]).unwrap();
            let ls = g.sum_all(last);
            let ss = g.mul(s, s).unwrap();
            let ss = g.sum_all(ss);
            g.add(ls, ss).unwrap()
        });
    }

    #[test]
    fn block_attention_grads() {
        // Two sequences of length 3, width 4.
        let ins = [
            rand_tensor(6, 4, 14),
            rand_tensor(6, 4, 15),
            rand_tensor(6, 2, 16),
        ];
        check_grad(&ins, |g, v| {
            let s = g.block_matmul_nt(v[0], v[1], 3, 3).unwrap();
            let m = g.causal_mask(s).unwrap();
            let a = g.row_softmax(m).unwrap();
            let o = g.block_matmul(a, v[2], 3, 3).unwrap();
            let t = g.activation(o, ActivationKind::Tanh);
            let last = g.rows(v[0], &[2, 5]).unwrap();
            // Last-query-only scores: one row per sequence.
            let s1 = g.block_matmul_nt(last, v[1], 1, 3).unwrap();
            let a1 = g.row_softmax(s1).unwrap();
            let o1 = g.block_matmul(a1, v[2], 1, 3).unwrap();
            let x = g.sum_all(t);
            let y = g.mul(o1, o1).unwrap();
            let y = g.sum_all(y);
            g.add(x, y).unwrap()
        });
    }

    #[test]
    fn block_ops_match_dense_per_block() {
        let a = rand_tensor(6, 4, 17);
        let b = rand_tensor(6, 4, 18);
        let mut g = Graph::new();
        let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
        let s = g.block_matmul_nt(va, vb, 3, 3).unwrap();
        for k in 0..2 {
            for i in 0..3 {
                for j in 0..3 {
                    let want: f64 = (0..4)
                        .map(|c| a.get(3 * k + i, c) * b.get(3 * k + j, c))
                        .sum();
                    assert!((g.value(s).get(3 * k + i, j) - want).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(rand_tensor(2, 2, 19));
        let p = g.param(&rand_tensor(2, 2, 20));
        let m = g.matmul(c, p).unwrap();
        let l = g.sum_all(m);
        let grads = g.backward(l).unwrap();
        assert!(grads.get(c).is_none());
        assert!(grads.get(p).is_some());
    }
}
