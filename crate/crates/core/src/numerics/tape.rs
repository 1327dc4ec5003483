use rand::Rng;

use super::gemm::{matmul_into, matmul_nt_into, matmul_tn_into};
use super::seq::{self, AttentionCache, LstmCache};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

/// Row layout of a padded batch of sequences stored as `[batch·t_max, width]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeqLayout {
    pub t_max: usize,
    pub lengths: Vec<usize>,
}

impl SeqLayout {
    pub fn single(frames: usize) -> Self {
        Self {
            t_max: frames,
            lengths: vec![frames],
        }
    }

    pub fn batch(lengths: Vec<usize>) -> Self {
        let t_max = lengths.iter().copied().max().unwrap_or(0);
        Self { t_max, lengths }
    }

    pub fn batch_size(&self) -> usize {
        self.lengths.len()
    }

    pub fn rows(&self) -> usize {
        self.t_max * self.lengths.len()
    }

    pub fn row(&self, seq: usize, t: usize) -> usize {
        seq * self.t_max + t
    }
}

pub(crate) enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Swish(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Softmax { x: Var, axis: usize },
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        axis: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Glu(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Var, Var),
    Dropout { x: Var, mask: Vec<f64> },
    DepthwiseConv { x: Var, kernel: Var, layout: SeqLayout },
    Attention(Box<AttentionCache>),
    Lstm(Box<LstmCache>),
    Sum(Var),
    Mean(Var),
    /// Output element `g` depends only on input rows `[g·group, (g+1)·group)`
    /// through the stored local gradient.
    Grouped { x: Var, local: Vec<f64>, group: usize },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Reverse-mode differentiation tape. Records operations eagerly and replays
/// their adjoints in reverse insertion order.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

/// Outer/axis/inner extents for reductions along `axis`.
fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let n = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, n, inner)
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn sigmoid_f(v: f64) -> f64 {
    sigmoid(v)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node; all gradients become absent.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.grads.clear();
    }

    pub(crate) fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient accumulated by the last [`Tape::backward`], if `v` was reached.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension {
                op: "matmul",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(m, k, n, self.value(a).data(), self.value(b).data(), &mut out, false);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, rg, Op::MatMul(a, b)))
    }

    fn broadcast_check(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::Dimension {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(())
    }

    /// `a + b`, with `b` broadcast over the leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_check("add", a, b)?;
        let bv = self.value(b).data();
        let n = bv.len().max(1);
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bv[i % n])
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, data)?, rg, Op::Add(a, b)))
    }

    /// `a ⊙ b`, with `b` broadcast over the leading axes of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_check("mul", a, b)?;
        let bv = self.value(b).data();
        let n = bv.len().max(1);
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * bv[i % n])
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, data)?, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|v| v * c);
        let rg = self.rg(a);
        self.push(value, rg, Op::Scale(a, c))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(value, rg, op)
    }

    pub fn swish(&mut self, a: Var) -> Var {
        self.unary(a, |v| v * sigmoid(v), Op::Swish(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |v| v.max(0.0), Op::Relu(a))
    }

    /// Softmax along `axis`, max-subtracted.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Dimension {
                op: "softmax axis",
                left: shape,
                right: vec![axis],
            });
        }
        let xv = self.value(x);
        if !xv.is_finite() {
            return Err(Error::Numeric("softmax input is not finite".into()));
        }
        let (outer, n, inner) = axis_extents(&shape, axis);
        let src = xv.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let max = (0..n).map(|j| src[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..n {
                    let e = (src[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    total += e;
                }
                for j in 0..n {
                    out[idx(j)] /= total;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::Softmax { x, axis }))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if !xv.is_finite() {
            return Err(Error::Numeric("log_softmax input is not finite".into()));
        }
        let cols = xv.cols();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(cols) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::LogSoftmax(x)))
    }

    /// Normalizes each slice along `axis` to zero mean and unit variance
    /// (ε = 1e-5 under the square root), then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, axis: usize) -> Result<Var> {
        const EPS: f64 = 1e-5;
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Dimension {
                op: "layer_norm axis",
                left: shape,
                right: vec![axis],
            });
        }
        let n_axis = shape[axis];
        for p in [gain, bias] {
            if self.value(p).numel() != n_axis {
                return Err(Error::Dimension {
                    op: "layer_norm affine",
                    left: vec![n_axis],
                    right: self.shape(p).to_vec(),
                });
            }
        }
        let (outer, n, inner) = axis_extents(&shape, axis);
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let bvals = self.value(bias).data();
        let mut xhat = vec![0.0; src.len()];
        let mut out = vec![0.0; src.len()];
        let mut rstd = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let mean = (0..n).map(|j| src[idx(j)]).sum::<f64>() / n as f64;
                let var = (0..n).map(|j| (src[idx(j)] - mean).powi(2)).sum::<f64>() / n as f64;
                let r = 1.0 / (var + EPS).sqrt();
                rstd[o * inner + i] = r;
                for j in 0..n {
                    let xh = (src[idx(j)] - mean) * r;
                    xhat[idx(j)] = xh;
                    out[idx(j)] = xh * g[j] + bvals[j];
                }
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Tensor::new(shape, out)?,
            rg,
            Op::LayerNorm {
                x,
                gain,
                bias,
                axis,
                xhat,
                rstd,
            },
        ))
    }

    /// Gated linear unit over the last axis: `first_half ⊙ σ(second_half)`.
    pub fn glu(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let cols = xv.cols();
        if cols % 2 != 0 {
            return Err(Error::Dimension {
                op: "glu",
                left: xv.shape().to_vec(),
                right: vec![2],
            });
        }
        let half = cols / 2;
        let mut out = Vec::with_capacity(xv.numel() / 2);
        for row in xv.data().chunks(cols) {
            for j in 0..half {
                out.push(row[j] * sigmoid(row[half + j]));
            }
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = half;
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::Glu(x)))
    }

    /// Columns `[start, end)` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        let cols = xv.cols();
        if start >= end || end > cols || xv.rank() != 2 {
            return Err(Error::Dimension {
                op: "slice_cols",
                left: xv.shape().to_vec(),
                right: vec![start, end],
            });
        }
        let out: Vec<f64> = xv.data().chunks(cols).flat_map(|r| r[start..end].iter().copied()).collect();
        let shape = vec![xv.rows(), end - start];
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::SliceCols { x, start }))
    }

    /// Row-wise concatenation `[a | b]` of two matrices.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.rows() != bv.rows() {
            return Err(Error::Dimension {
                op: "concat_cols",
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let (ca, cb) = (av.cols(), bv.cols());
        let mut out = Vec::with_capacity(av.numel() + bv.numel());
        for r in 0..av.rows() {
            out.extend_from_slice(av.row(r));
            out.extend_from_slice(bv.row(r));
        }
        let shape = vec![av.rows(), ca + cb];
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::ConcatCols(a, b)))
    }

    /// Inverted dropout with drop probability `p`; identity when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 {
            return x;
        }
        let keep = 1.0 / (1.0 - p);
        let xv = self.value(x);
        let mask: Vec<f64> = (0..xv.numel())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let value = Tensor::new(
            xv.shape().to_vec(),
            xv.data().iter().zip(&mask).map(|(v, m)| v * m).collect(),
        )
        .expect("mask matches input");
        let rg = self.rg(x);
        self.push(value, rg, Op::Dropout { x, mask })
    }

    /// Per-channel 1-D convolution with "same" zero padding over each
    /// sequence of a padded batch. `kernel` is `[K, D]` with `K` odd.
    pub fn depthwise_conv1d(&mut self, x: Var, kernel: Var, layout: &SeqLayout) -> Result<Var> {
        let value = seq::depthwise_forward(self.value(x), self.value(kernel), layout)?;
        let rg = self.rg(x) || self.rg(kernel);
        Ok(self.push(
            value,
            rg,
            Op::DepthwiseConv {
                x,
                kernel,
                layout: layout.clone(),
            },
        ))
    }

    /// Multi-head scaled dot-product self-attention over a padded batch.
    /// `rel_bias`, when given, is `[heads, 2·max_rel + 1]` and is added to
    /// the score of every (query, key) pair by clipped offset `key − query`.
    /// Returns the attended values; weights are kept for [`Tape::attention_weights`].
    #[allow(clippy::too_many_arguments)]
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        rel_bias: Option<(Var, usize)>,
        layout: &SeqLayout,
    ) -> Result<Var> {
        let (value, cache) = seq::attention_forward(self, q, k, v, heads, rel_bias, layout)?;
        let rg = self.rg(q) || self.rg(k) || self.rg(v) || rel_bias.is_some_and(|(b, _)| self.rg(b));
        Ok(self.push(value, rg, Op::Attention(Box::new(cache))))
    }

    /// Post-softmax weights `[batch, heads, t_max, t_max]` of an attention node.
    pub fn attention_weights(&self, out: Var) -> Option<(&[f64], usize)> {
        match &self.nodes[out.0].op {
            Op::Attention(c) => Some((&c.probs, c.heads)),
            _ => None,
        }
    }

    /// Single-layer LSTM over a padded batch, gate order (input, forget, cell,
    /// output), zero initial state. Padded rows of the output are zero.
    pub fn lstm(&mut self, x: Var, w_ih: Var, w_hh: Var, bias: Var, layout: &SeqLayout, reverse: bool) -> Result<Var> {
        let (value, cache) = seq::lstm_forward(self, x, w_ih, w_hh, bias, layout, reverse)?;
        let rg = self.rg(x) || self.rg(w_ih) || self.rg(w_hh) || self.rg(bias);
        Ok(self.push(value, rg, Op::Lstm(Box::new(cache))))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), rg, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.numel().max(1) as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), rg, Op::Mean(x))
    }

    /// Records a vector output whose element `g` has the precomputed local
    /// gradient `local[g·group·cols ..]` with respect to rows `[g·group, (g+1)·group)` of `x`.
    pub(crate) fn grouped(&mut self, x: Var, values: Vec<f64>, local: Vec<f64>, group: usize) -> Var {
        debug_assert_eq!(local.len(), self.value(x).numel());
        let rg = self.rg(x);
        self.push(Tensor::vector(values), rg, Op::Grouped { x, local, group })
    }

    /// Back-propagates from the scalar `loss`, overwriting any previous gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Dimension {
                op: "backward (scalar loss required)",
                left: lv.shape().to_vec(),
                right: vec![],
            });
        }
        let seed = Tensor::full(lv.shape(), 1.0);
        self.grads.iter_mut().for_each(|g| *g = None);
        if !self.rg(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(seed);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    /// Gradient slot for `v`, allocated as zeros on first touch.
    fn slot<'a>(grads: &'a mut [Option<Tensor>], nodes: &[Node], v: Var) -> Option<&'a mut [f64]> {
        if !nodes[v.0].requires_grad {
            return None;
        }
        let g = grads[v.0].get_or_insert_with(|| Tensor::zeros(nodes[v.0].value.shape()));
        Some(g.data_mut())
    }

    fn propagate(&mut self, i: usize, g: &Tensor) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let out = &nodes[i].value;
        let gd = g.data();
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if let Some(ga) = Self::slot(grads, nodes, *a) {
                    matmul_nt_into(m, n, k, gd, nodes[b.0].value.data(), ga, true);
                }
                if let Some(gb) = Self::slot(grads, nodes, *b) {
                    matmul_tn_into(k, m, n, nodes[a.0].value.data(), gd, gb, true);
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = Self::slot(grads, nodes, *a) {
                    ga.iter_mut().zip(gd).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = Self::slot(grads, nodes, *b) {
                    let n = gb.len();
                    for (idx, y) in gd.iter().enumerate() {
                        gb[idx % n] += y;
                    }
                }
            }
            Op::Mul(a, b) => {
                let av = nodes[a.0].value.data();
                let bv = nodes[b.0].value.data();
                let n = bv.len();
                if let Some(ga) = Self::slot(grads, nodes, *a) {
                    for (idx, y) in gd.iter().enumerate() {
                        ga[idx] += y * bv[idx % n];
                    }
                }
                if let Some(gb) = Self::slot(grads, nodes, *b) {
                    for (idx, y) in gd.iter().enumerate() {
                        gb[idx % n] += y * av[idx];
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = Self::slot(grads, nodes, *a) {
                    ga.iter_mut().zip(gd).for_each(|(x, y)| *x += y * c);
                }
            }
            Op::Swish(a) => {
                let av = nodes[a.0].value.data();
                if let Some(ga) = Self::slot(grads, nodes, *a) {
                    for ((x, y), &v) in ga.iter_mut().zip(gd).zip(av) {
                        let s = sigmoid(v);
                        *x += y * (s + v * s * (1.0 - s));
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(ga) = Self::slot(grads, nodes, *a) {
                    for ((x, y), s) in ga.iter_mut().zip(gd).zip(out.data()) {
                        *x += y * s * (1.0 - s);
                    }
                }
            }
            Op::Tanh(a) => {
                if let Some(ga) = Self::slot(grads, nodes, *a) {
                    for ((x, y), t) in ga.iter_mut().zip(gd).zip(out.data()) {
                        *x += y * (1.0 - t * t);
                    }
                }
            }
            Op::Relu(a) => {
                let av = nodes[a.0].value.data();
                if let Some(ga) = Self::slot(grads, nodes, *a) {
                    for ((x, y), &v) in ga.iter_mut().zip(gd).zip(av) {
                        if v > 0.0 {
                            *x += y;
                        }
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = axis_extents(out.shape(), *axis);
                let p = out.data();
                if let Some(gx) = Self::slot(grads, nodes, *x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| (o * n + j) * inner + i;
                            let dot: f64 = (0..n).map(|j| p[idx(j)] * gd[idx(j)]).sum();
                            for j in 0..n {
                                gx[idx(j)] += p[idx(j)] * (gd[idx(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let cols = out.cols();
                if let Some(gx) = Self::slot(grads, nodes, *x) {
                    for ((gxr, gr), lr) in gx.chunks_mut(cols).zip(gd.chunks(cols)).zip(out.data().chunks(cols)) {
                        let total: f64 = gr.iter().sum();
                        for j in 0..cols {
                            gxr[j] += gr[j] - lr[j].exp() * total;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                axis,
                xhat,
                rstd,
            } => {
                let (outer, n, inner) = axis_extents(out.shape(), *axis);
                let gv = nodes[gain.0].value.data();
                if let Some(gg) = Self::slot(grads, nodes, *gain) {
                    for (idx, y) in gd.iter().enumerate() {
                        gg[(idx / inner) % n] += y * xhat[idx];
                    }
                }
                if let Some(gb) = Self::slot(grads, nodes, *bias) {
                    for (idx, y) in gd.iter().enumerate() {
                        gb[(idx / inner) % n] += y;
                    }
                }
                if let Some(gx) = Self::slot(grads, nodes, *x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| (o * n + j) * inner + i;
                            let mut m1 = 0.0;
                            let mut m2 = 0.0;
                            for j in 0..n {
                                let dxh = gd[idx(j)] * gv[j];
                                m1 += dxh;
                                m2 += dxh * xhat[idx(j)];
                            }
                            m1 /= n as f64;
                            m2 /= n as f64;
                            let r = rstd[o * inner + i];
                            for j in 0..n {
                                let dxh = gd[idx(j)] * gv[j];
                                gx[idx(j)] += r * (dxh - m1 - xhat[idx(j)] * m2);
                            }
                        }
                    }
                }
            }
            Op::Glu(x) => {
                let xv = nodes[x.0].value.data();
                let cols = nodes[x.0].value.cols();
                let half = cols / 2;
                if let Some(gx) = Self::slot(grads, nodes, *x) {
                    for (r, gr) in gd.chunks(half).enumerate() {
                        let row = &xv[r * cols..(r + 1) * cols];
                        let grow = &mut gx[r * cols..(r + 1) * cols];
                        for j in 0..half {
                            let s = sigmoid(row[half + j]);
                            grow[j] += gr[j] * s;
                            grow[half + j] += gr[j] * row[j] * s * (1.0 - s);
                        }
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let cols = nodes[x.0].value.cols();
                let w = out.cols();
                if let Some(gx) = Self::slot(grads, nodes, *x) {
                    for (r, gr) in gd.chunks(w).enumerate() {
                        let base = r * cols + start;
                        gx[base..base + w].iter_mut().zip(gr).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::ConcatCols(a, b) => {
                let ca = nodes[a.0].value.cols();
                let cb = nodes[b.0].value.cols();
                if let Some(ga) = Self::slot(grads, nodes, *a) {
                    for (r, gr) in gd.chunks(ca + cb).enumerate() {
                        ga[r * ca..(r + 1) * ca].iter_mut().zip(&gr[..ca]).for_each(|(x, y)| *x += y);
                    }
                }
                if let Some(gb) = Self::slot(grads, nodes, *b) {
                    for (r, gr) in gd.chunks(ca + cb).enumerate() {
                        gb[r * cb..(r + 1) * cb].iter_mut().zip(&gr[ca..]).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(gx) = Self::slot(grads, nodes, *x) {
                    for ((a, y), m) in gx.iter_mut().zip(gd).zip(mask) {
                        *a += y * m;
                    }
                }
            }
            Op::DepthwiseConv { x, kernel, layout } => {
                let xv = &nodes[x.0].value;
                let kv = &nodes[kernel.0].value;
                if nodes[x.0].requires_grad {
                    let gx = Self::slot(grads, nodes, *x).unwrap();
                    seq::depthwise_backward_input(gd, kv, layout, gx);
                }
                if nodes[kernel.0].requires_grad {
                    let gk = Self::slot(grads, nodes, *kernel).unwrap();
                    seq::depthwise_backward_kernel(gd, xv, kv.shape()[0], layout, gk);
                }
            }
            Op::Attention(cache) => {
                let value_of = |v: Var| &nodes[v.0].value;
                let needs = |v: Var| nodes[v.0].requires_grad;
                for (v, contrib) in seq::attention_backward(cache, gd, &value_of, &needs) {
                    if let Some(gv) = Self::slot(grads, nodes, v) {
                        gv.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::Lstm(cache) => {
                let value_of = |v: Var| &nodes[v.0].value;
                let needs = |v: Var| nodes[v.0].requires_grad;
                for (v, contrib) in seq::lstm_backward(cache, out, gd, &value_of, &needs) {
                    if let Some(gv) = Self::slot(grads, nodes, v) {
                        gv.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = Self::slot(grads, nodes, *x) {
                    gx.iter_mut().for_each(|a| *a += gd[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(gx) = Self::slot(grads, nodes, *x) {
                    let s = gd[0] / gx.len().max(1) as f64;
                    gx.iter_mut().for_each(|a| *a += s);
                }
            }
            Op::Grouped { x, local, group } => {
                let cols = nodes[x.0].value.cols();
                let block = group * cols;
                if let Some(gx) = Self::slot(grads, nodes, *x) {
                    for (gidx, y) in gd.iter().enumerate() {
                        let range = gidx * block..(gidx + 1) * block;
                        gx[range.clone()].iter_mut().zip(&local[range]).for_each(|(a, l)| *a += y * l);
                    }
                }
            }
        }
    }
}
