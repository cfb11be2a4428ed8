//! Define-by-run reverse-mode differentiation.
//!
//! Every primitive evaluates eagerly and appends a node to the [`Tape`].
//! Nodes only ever reference earlier nodes, so walking the node list
//! backwards is a valid reverse topological order and each node is
//! visited exactly once per [`Tape::backward`] call.

use crate::error::{Error, Result};
use crate::tensor::{gemm, numel, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Layout and masking for the fused multi-head attention primitive.
///
/// Queries are `batch·q_len × heads·head_dim` with the batch laid out in
/// row blocks; keys and values are `batch·k_len × heads·head_dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionSpec {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub heads: usize,
    /// Mask key `j` for query `i` whenever `j > i`.
    pub causal: bool,
    /// Valid key count per batch entry; keys at or past it are padding.
    pub key_lens: Option<Vec<usize>>,
}

struct AttentionSaved {
    q: Var,
    k: Var,
    v: Var,
    spec: AttentionSpec,
    head_dim: usize,
    /// Softmax weights, `[batch, heads, q_len, k_len]`.
    probs: Vec<f64>,
    /// Inverted-dropout multipliers over `probs`, if dropout was applied.
    keep: Option<Vec<f64>>,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    Relu(Var),
    ConcatCols(Vec<Var>),
    SliceCols { src: Var, start: usize },
    Sum(Var),
    SoftmaxRows(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Gather { table: Var, ids: Vec<usize> },
    OuterFlatten(Var),
    Attention(Box<AttentionSaved>),
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<f64>, count: usize },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Recorded computation. Rebuilt for every forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
}

/// Variance epsilon inside the layer-norm square root.
pub const LAYER_NORM_EPS: f64 = 1e-6;

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        _ => (numel(&shape[..shape.len() - 1]), shape[shape.len() - 1]),
    }
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

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Registers a tensor as a leaf; it is differentiated iff the tensor
    /// has `requires_grad` set.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), t.requires_grad(), Op::Leaf)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        if numel(shape) != data.len() {
            return Err(Error::dim(
                "constant",
                format!("shape {:?} vs {} values", shape, data.len()),
            ));
        }
        Ok(self.push(shape.to_vec(), data, false, Op::Leaf))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    /// Accumulated gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads[v.0].as_deref()
    }

    /// Attention weights saved by an [`Tape::attention`] node, laid out as
    /// `[batch, heads, q_len, k_len]`.
    pub fn attention_weights(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention(saved) => Some(&saved.probs),
            _ => None,
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim(
                "matmul",
                format!("cannot multiply {:?} by {:?}", sa, sb),
            ));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, self.value(a), (k, 1), self.value(b), (n, 1), 0.0, &mut out, (n, 1));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, rg, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::dim("transpose", format!("expected a matrix, got {:?}", s)));
        }
        let (m, n) = (s[0], s[1]);
        let src = self.value(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(vec![n, m], out, rg, Op::Transpose(a)))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                op,
                format!("shapes {:?} and {:?} differ", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, node: Op) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, rg, node))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * s).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), out, rg, Op::Scale(a, s))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// Adds a length-`n` vector to every row of a `… × n` tensor.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (_, n) = rows_cols(self.shape(a));
        if self.value(bias).len() != n || self.shape(a).is_empty() {
            return Err(Error::dim(
                "add_row",
                format!("bias {:?} does not broadcast over {:?}", self.shape(bias), self.shape(a)),
            ));
        }
        let b = self.value(bias);
        let out = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, x)| x + b[i % n])
            .collect();
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(self.shape(a).to_vec(), out, rg, Op::AddRow(a, bias)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| x.max(0.0)).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), out, rg, Op::Relu(a))
    }

    /// Concatenation along the last axis. All parts share the leading axes.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::dim("concat", "no parts given"))?;
        let lead = self.shape(first)[..self.shape(first).len().saturating_sub(1)].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for (i, &p) in parts.iter().enumerate() {
            let s = self.shape(p);
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(Error::dim(
                    "concat",
                    format!("part {} has shape {:?}, expected leading axes {:?}", i, s, lead),
                ));
            }
            widths.push(s[s.len() - 1]);
        }
        let rows = numel(&lead);
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p);
            for r in 0..rows {
                out[r * total + offset..r * total + offset + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let mut shape = lead;
        shape.push(total);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(shape, out, rg, Op::ConcatCols(parts.to_vec())))
    }

    /// Columns `start..start + width` of the last axis.
    pub fn slice_cols(&mut self, src: Var, start: usize, width: usize) -> Result<Var> {
        let s = self.shape(src).to_vec();
        let (rows, cols) = rows_cols(&s);
        if s.is_empty() || start + width > cols {
            return Err(Error::dim(
                "slice_cols",
                format!("columns {}..{} out of range for {:?}", start, start + width, s),
            ));
        }
        let v = self.value(src);
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            out.extend_from_slice(&v[r * cols + start..r * cols + start + width]);
        }
        let mut shape = s;
        *shape.last_mut().unwrap() = width;
        let rg = self.rg(src);
        Ok(self.push(shape, out, rg, Op::SliceCols { src, start }))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).iter().sum();
        let rg = self.rg(a);
        self.push(Vec::new(), vec![s], rg, Op::Sum(a))
    }

    /// Row-wise softmax over the last axis, stabilised by row-max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.is_empty() {
            return Err(Error::dim("softmax_rows", "scalar input"));
        }
        let (rows, cols) = rows_cols(&s);
        let mut out = self.value(a).to_vec();
        for r in 0..rows {
            softmax_in_place(&mut out[r * cols..(r + 1) * cols]);
        }
        let rg = self.rg(a);
        Ok(self.push(s, out, rg, Op::SoftmaxRows(a)))
    }

    /// Layer normalisation over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let (rows, d) = rows_cols(&s);
        if s.is_empty() || d < 2 {
            return Err(Error::Config(format!(
                "layer_norm needs a feature width of at least 2, got {:?}",
                s
            )));
        }
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(Error::dim(
                "layer_norm",
                format!(
                    "gain {:?} / bias {:?} must have {} elements",
                    self.shape(gain),
                    self.shape(bias),
                    d
                ),
            ));
        }
        let xs = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let mut xhat = vec![0.0; rows * d];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(s, out, rg, Op::LayerNorm { x, gain, bias, xhat, rstd }))
    }

    /// Row lookup: output row `i` is `table[ids[i]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table);
        if s.len() != 2 {
            return Err(Error::dim("gather", format!("table must be a matrix, got {:?}", s)));
        }
        let (n_rows, d) = (s[0], s[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= n_rows) {
            return Err(Error::Input(format!("token id {} out of range for vocabulary of {}", bad, n_rows)));
        }
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(vec![ids.len(), d], out, rg, Op::Gather { table, ids: ids.to_vec() }))
    }

    /// Per-row serialised outer product: row `x` of width `n` becomes the
    /// row-major flattening of `x xᵀ`, width `n²`.
    pub fn outer_flatten(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.is_empty() {
            return Err(Error::dim("outer_flatten", "scalar input"));
        }
        let (rows, n) = rows_cols(&s);
        let v = self.value(a);
        let mut out = vec![0.0; rows * n * n];
        for r in 0..rows {
            let x = &v[r * n..(r + 1) * n];
            let o = &mut out[r * n * n..(r + 1) * n * n];
            for i in 0..n {
                for j in 0..n {
                    o[i * n + j] = x[i] * x[j];
                }
            }
        }
        let mut shape = s;
        *shape.last_mut().unwrap() = n * n;
        let rg = self.rg(a);
        Ok(self.push(shape, out, rg, Op::OuterFlatten(a)))
    }

    /// Fused scaled dot-product attention over all heads and batch entries.
    ///
    /// Head `h` reads columns `h·dh..(h+1)·dh` of `q`, `k`, `v` and writes
    /// the same columns of the output, so the result is the concatenation
    /// `[O_1, …, O_H]`. Logits are scaled by `1/√dh`; masked keys get
    /// probability exactly zero. `keep`, when given, holds inverted-dropout
    /// multipliers laid out like the attention weights.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: &AttentionSpec, keep: Option<Vec<f64>>) -> Result<Var> {
        let (qs, ks, vs) = (self.shape(q), self.shape(k), self.shape(v));
        let AttentionSpec {
            batch,
            q_len,
            k_len,
            heads,
            causal,
            ..
        } = *spec;
        if qs.len() != 2 || ks.len() != 2 || vs != ks || heads == 0 {
            return Err(Error::dim(
                "attention",
                format!("q {:?}, k {:?}, v {:?} with {} heads", qs, ks, vs, heads),
            ));
        }
        let d = qs[1];
        if ks[1] != d || qs[0] != batch * q_len || ks[0] != batch * k_len || d % heads != 0 {
            return Err(Error::dim(
                "attention",
                format!(
                    "q {:?}, k {:?} inconsistent with batch {} × ({} queries, {} keys) and {} heads",
                    qs, ks, batch, q_len, k_len, heads
                ),
            ));
        }
        if causal && q_len != k_len {
            return Err(Error::dim(
                "attention",
                format!("causal mask needs square attention, got {}×{}", q_len, k_len),
            ));
        }
        if let Some(lens) = &spec.key_lens {
            if lens.len() != batch || lens.iter().any(|&l| l == 0 || l > k_len) {
                return Err(Error::dim(
                    "attention",
                    format!("mask lengths {:?} do not fit batch {} with {} keys", lens, batch, k_len),
                ));
            }
        }
        let block = q_len * k_len;
        if let Some(kp) = &keep {
            if kp.len() != batch * heads * block {
                return Err(Error::dim("attention", "dropout mask has the wrong length"));
            }
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![0.0; batch * heads * block];
        let mut out = vec![0.0; batch * q_len * d];
        let mut dropped = vec![0.0; block];
        for b in 0..batch {
            let valid = spec.key_lens.as_ref().map_or(k_len, |l| l[b]);
            for h in 0..heads {
                let p = &mut probs[(b * heads + h) * block..(b * heads + h + 1) * block];
                let qo = b * q_len * d + h * dh;
                let ko = b * k_len * d + h * dh;
                gemm(q_len, dh, k_len, scale, &qv[qo..], (d, 1), &kv[ko..], (1, d), 0.0, p, (k_len, 1));
                for i in 0..q_len {
                    let row = &mut p[i * k_len..(i + 1) * k_len];
                    let limit = if causal { valid.min(i + 1) } else { valid };
                    for x in row[limit..].iter_mut() {
                        *x = f64::NEG_INFINITY;
                    }
                    softmax_in_place(row);
                }
                let weights: &[f64] = match &keep {
                    Some(kp) => {
                        let m = &kp[(b * heads + h) * block..(b * heads + h + 1) * block];
                        for ((o, &pp), &mm) in dropped.iter_mut().zip(p.iter()).zip(m) {
                            *o = pp * mm;
                        }
                        &dropped
                    }
                    None => p,
                };
                gemm(q_len, k_len, dh, 1.0, weights, (k_len, 1), &vv[ko..], (d, 1), 0.0, &mut out[qo..], (d, 1));
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        let saved = AttentionSaved {
            q,
            k,
            v,
            spec: spec.clone(),
            head_dim: dh,
            probs,
            keep,
        };
        Ok(self.push(vec![batch * q_len, d], out, rg, Op::Attention(Box::new(saved))))
    }

    /// Mean token-level cross-entropy of `logits` (`n × vocab`) against
    /// `targets`; `None` entries are ignored.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != targets.len() {
            return Err(Error::dim(
                "cross_entropy",
                format!("logits {:?} vs {} targets", s, targets.len()),
            ));
        }
        let (n, vocab) = (s[0], s[1]);
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= vocab) {
            return Err(Error::Input(format!("target id {} out of range for vocabulary of {}", bad, vocab)));
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(Error::Contract("cross_entropy needs at least one target".into()));
        }
        let mut probs = self.value(logits).to_vec();
        let mut total = 0.0;
        for (r, t) in targets.iter().enumerate().take(n) {
            let row = &mut probs[r * vocab..(r + 1) * vocab];
            softmax_in_place(row);
            if let Some(t) = t {
                let p = row[*t];
                // f64::max would turn a NaN probability into a finite loss
                total -= if p.is_nan() { p } else { p.max(f64::MIN_POSITIVE).ln() };
            }
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Vec::new(),
            vec![total / count as f64],
            rg,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
        ))
    }

    /// Back-propagates from a scalar. Leaf gradients accumulate across
    /// calls; intermediate gradients are rebuilt each call.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = self.nodes[i].op {
                match &mut self.leaf_grads[i] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(g),
                }
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = nodes[b.0].shape[1];
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                acc(*a, &mut |ga| gemm(m, n, k, 1.0, g, (n, 1), bv, (1, n), 1.0, ga, (k, 1)));
                acc(*b, &mut |gb| gemm(k, m, n, 1.0, av, (1, k), g, (n, 1), 1.0, gb, (n, 1)));
            }
            Op::Transpose(a) => {
                let (m, n) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                acc(*a, &mut |ga| {
                    for r in 0..m {
                        for c in 0..n {
                            ga[r * n + c] += g[c * m + r];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                acc(*a, &mut |ga| {
                    for j in 0..ga.len() {
                        ga[j] += g[j] * bv[j];
                    }
                });
                acc(*b, &mut |gb| {
                    for j in 0..gb.len() {
                        gb[j] += g[j] * av[j];
                    }
                });
            }
            Op::Scale(a, s) => acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += s * y)),
            Op::AddRow(a, bias) => {
                acc(*a, &mut |ga| add_into(ga, g));
                let n = nodes[bias.0].value.len();
                acc(*bias, &mut |gb| {
                    for (j, y) in g.iter().enumerate() {
                        gb[j % n] += y;
                    }
                });
            }
            Op::Relu(a) => {
                let av = &nodes[a.0].value;
                acc(*a, &mut |ga| {
                    for j in 0..ga.len() {
                        if av[j] > 0.0 {
                            ga[j] += g[j];
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = *node.shape.last().unwrap();
                let rows = node.value.len() / total.max(1);
                let mut offset = 0;
                for &p in parts {
                    let w = *nodes[p.0].shape.last().unwrap();
                    acc(p, &mut |gp| {
                        for r in 0..rows {
                            add_into(&mut gp[r * w..(r + 1) * w], &g[r * total + offset..r * total + offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::SliceCols { src, start } => {
                let cols = *nodes[src.0].shape.last().unwrap();
                let w = *node.shape.last().unwrap();
                let rows = node.value.len() / w.max(1);
                acc(*src, &mut |gs| {
                    for r in 0..rows {
                        add_into(&mut gs[r * cols + start..r * cols + start + w], &g[r * w..(r + 1) * w]);
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0])),
            Op::SoftmaxRows(a) => {
                let (rows, cols) = rows_cols(&node.shape);
                let y = &node.value;
                acc(*a, &mut |ga| {
                    for r in 0..rows {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..cols {
                            ga[r * cols + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let (rows, d) = rows_cols(&node.shape);
                let gv = &nodes[gain.0].value;
                acc(*x, &mut |gx| {
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            mean_dh += dh;
                            mean_dh_h += dh * hr[j];
                        }
                        mean_dh /= d as f64;
                        mean_dh_h /= d as f64;
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            gx[r * d + j] += rstd[r] * (dh - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                });
                acc(*gain, &mut |gg| {
                    for (j, (y, h)) in g.iter().zip(xhat).enumerate() {
                        gg[j % d] += y * h;
                    }
                });
                acc(*bias, &mut |gb| {
                    for (j, y) in g.iter().enumerate() {
                        gb[j % d] += y;
                    }
                });
            }
            Op::Gather { table, ids } => {
                let d = nodes[table.0].shape[1];
                acc(*table, &mut |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::OuterFlatten(a) => {
                let (rows, n) = rows_cols(&nodes[a.0].shape);
                let av = &nodes[a.0].value;
                acc(*a, &mut |ga| {
                    for r in 0..rows {
                        let x = &av[r * n..(r + 1) * n];
                        let gr = &g[r * n * n..(r + 1) * n * n];
                        for i in 0..n {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += (gr[i * n + j] + gr[j * n + i]) * x[j];
                            }
                            ga[r * n + i] += s;
                        }
                    }
                });
            }
            Op::Attention(saved) => self.backprop_attention(saved, g, grads),
            Op::CrossEntropy { logits, targets, probs, count } => {
                let vocab = nodes[logits.0].shape[1];
                let w = g[0] / *count as f64;
                acc(*logits, &mut |gl| {
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = t else { continue };
                        let row = &mut gl[r * vocab..(r + 1) * vocab];
                        for j in 0..vocab {
                            row[j] += w * probs[r * vocab + j];
                        }
                        row[*t] -= w;
                    }
                });
            }
        }
    }

    fn backprop_attention(&self, s: &AttentionSaved, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let AttentionSpec {
            batch,
            q_len,
            k_len,
            heads,
            ..
        } = s.spec;
        let dh = s.head_dim;
        let d = dh * heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let block = q_len * k_len;
        let (qv, kv, vv) = (&self.nodes[s.q.0].value, &self.nodes[s.k.0].value, &self.nodes[s.v.0].value);
        let mut dq = vec![0.0; qv.len()];
        let mut dk = vec![0.0; kv.len()];
        let mut dv = vec![0.0; vv.len()];
        let mut weights = vec![0.0; block];
        let mut dp = vec![0.0; block];
        for b in 0..batch {
            for h in 0..heads {
                let range = (b * heads + h) * block..(b * heads + h + 1) * block;
                let p = &s.probs[range.clone()];
                match &s.keep {
                    Some(kp) => {
                        for ((w, &pp), &m) in weights.iter_mut().zip(p).zip(&kp[range.clone()]) {
                            *w = pp * m;
                        }
                    }
                    None => weights.copy_from_slice(p),
                }
                let qo = b * q_len * d + h * dh;
                let ko = b * k_len * d + h * dh;
                // dV += Wᵀ·dO
                gemm(k_len, q_len, dh, 1.0, &weights, (1, k_len), &g[qo..], (d, 1), 1.0, &mut dv[ko..], (d, 1));
                // dW = dO·Vᵀ
                gemm(q_len, dh, k_len, 1.0, &g[qo..], (d, 1), &vv[ko..], (1, d), 0.0, &mut dp, (k_len, 1));
                if let Some(kp) = &s.keep {
                    for (x, &m) in dp.iter_mut().zip(&kp[range.clone()]) {
                        *x *= m;
                    }
                }
                // softmax backward, folded with the logit scale
                for i in 0..q_len {
                    let pr = &p[i * k_len..(i + 1) * k_len];
                    let gr = &mut dp[i * k_len..(i + 1) * k_len];
                    let dot: f64 = pr.iter().zip(gr.iter()).map(|(a, b)| a * b).sum();
                    for j in 0..k_len {
                        gr[j] = pr[j] * (gr[j] - dot) * scale;
                    }
                }
                gemm(q_len, k_len, dh, 1.0, &dp, (k_len, 1), &kv[ko..], (d, 1), 1.0, &mut dq[qo..], (d, 1));
                gemm(k_len, q_len, dh, 1.0, &dp, (1, k_len), &qv[qo..], (d, 1), 1.0, &mut dk[ko..], (d, 1));
            }
        }
        for (var, delta) in [(s.q, dq), (s.k, dk), (s.v, dv)] {
            if !self.nodes[var.0].requires_grad {
                continue;
            }
            match &mut grads[var.0] {
                Some(acc) => add_into(acc, &delta),
                slot => *slot = Some(delta),
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

/// Numerically stable softmax of one row. `-inf` entries map to exactly 0.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return;
    }
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}
