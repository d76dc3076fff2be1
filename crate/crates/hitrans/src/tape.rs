//! Reverse-mode automatic differentiation on a flat operation tape.
//!
//! Forward calls append nodes (each storing its output values) to a [`Tape`];
//! [`Tape::backward`] replays the tape in reverse and returns the gradient of
//! a scalar loss with respect to every recorded node. Leaves snapshot their
//! input tensors, so a tape is immutable and self-contained once built.

use crate::error::{Error, Result};
use crate::tensor::{exact_sum_with, Tensor};
use rand::Rng;

/// Probabilities are clamped to at least this value before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct NodeId(usize);

/// Whether stochastic layers (dropout) are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Logarithm base used by the cross-entropy loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogBase {
    Two,
    Natural,
}

enum Op {
    Leaf,
    Constant,
    Add(NodeId, NodeId),
    /// `[m, n] + [n]`, the vector added to every row.
    AddRowBroadcast(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Matmul {
        a: NodeId,
        b: NodeId,
    },
    Transpose(NodeId),
    Reshape(NodeId),
    Concat {
        inputs: Vec<NodeId>,
        axis: usize,
    },
    SliceCols {
        x: NodeId,
        start: usize,
    },
    /// Columns where `mask` is false become `-inf` (pre-softmax attention mask).
    MaskFillCols {
        x: NodeId,
        mask: Vec<bool>,
    },
    SoftmaxRows(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    },
    Selu(NodeId),
    Gelu(NodeId),
    /// Elementwise multiply by a sampled keep/scale mask (inverted dropout).
    Dropout {
        x: NodeId,
        scale: Vec<f64>,
    },
    /// Dimension-wise max over rows where `keep` is true; output `[1, d]`.
    MaxPoolRows {
        x: NodeId,
        keep: Vec<bool>,
    },
    EmbeddingLookup {
        table: NodeId,
        ids: Vec<usize>,
    },
    Sum(NodeId),
    LogClamped {
        x: NodeId,
        base: LogBase,
    },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    data: Vec<f64>,
    needs_grad: bool,
}

/// Recorded forward computation; see the module docs.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by one [`Tape::backward`] pass.
#[derive(Debug)]
pub struct Gradients {
    g: Vec<Vec<f64>>,
}

impl Gradients {
    /// Gradient of the loss with respect to the node's output.
    pub fn get(&self, id: NodeId) -> &[f64] {
        &self.g[id.0]
    }
}

const SELU_LAMBDA: f64 = 1.050_700_987_355_480_5;
const SELU_ALPHA: f64 = 1.673_263_242_354_377_2;

fn selu_scalar(x: f64) -> f64 {
    if x > 0.0 {
        SELU_LAMBDA * x
    } else {
        SELU_LAMBDA * SELU_ALPHA * (x.exp() - 1.0)
    }
}

fn selu_deriv(x: f64) -> f64 {
    if x > 0.0 {
        SELU_LAMBDA
    } else {
        SELU_LAMBDA * SELU_ALPHA * x.exp()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

fn gelu_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_K * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_deriv(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_K * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>, needs_grad: bool) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node { op, shape, data, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Records a snapshot of `t` as a differentiation root; the node tracks
    /// gradients iff `t.requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> NodeId {
        self.push(Op::Leaf, t.shape.clone(), t.data.clone(), t.requires_grad)
    }

    /// Records a value that never receives gradient.
    pub fn constant(&mut self, t: &Tensor) -> NodeId {
        self.push(Op::Constant, t.shape.clone(), t.data.clone(), false)
    }

    pub fn constant_from(&mut self, shape: &[usize], data: Vec<f64>) -> Result<NodeId> {
        let t = Tensor::from_vec(shape, data)?;
        Ok(self.constant(&t))
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn data(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].data
    }

    /// The node's output as a detached tensor.
    pub fn tensor(&self, id: NodeId) -> Tensor {
        let n = &self.nodes[id.0];
        Tensor { shape: n.shape.clone(), data: n.data.clone(), requires_grad: false, grad: None }
    }

    /// The value of a single-element node.
    pub fn value(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].data.len(), 1);
        self.nodes[id.0].data[0]
    }

    fn dims2(&self, id: NodeId) -> Result<(usize, usize)> {
        match self.nodes[id.0].shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::Shape(format!("expected rank-2 operand, got shape {:?}", s))),
        }
    }

    // ── elementwise and shape ops ───────────────────────────────────────────

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "add requires equal shapes: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data: Vec<f64> =
            self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add(a, b), self.nodes[a.0].shape.clone(), data, needs))
    }

    /// `x: [m, n]` plus a vector `v: [n]` added to every row.
    pub fn add_row_broadcast(&mut self, x: NodeId, v: NodeId) -> Result<NodeId> {
        let (m, n) = self.dims2(x)?;
        if self.shape(v) != [n] {
            return Err(Error::Shape(format!(
                "row broadcast requires [{}] vector, got {:?}",
                n,
                self.shape(v)
            )));
        }
        let mut data = Vec::with_capacity(m * n);
        for r in 0..m {
            for c in 0..n {
                data.push(self.data(x)[r * n + c] + self.data(v)[c]);
            }
        }
        let needs = self.needs(x) || self.needs(v);
        Ok(self.push(Op::AddRowBroadcast(x, v), vec![m, n], data, needs))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "mul requires equal shapes: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data: Vec<f64> =
            self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mul(a, b), self.nodes[a.0].shape.clone(), data, needs))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let data: Vec<f64> = self.data(a).iter().map(|x| x * c).collect();
        let needs = self.needs(a);
        self.push(Op::Scale(a, c), self.nodes[a.0].shape.clone(), data, needs)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_impl(a, b, false)
    }

    /// Matrix product whose inner-axis accumulation is bitwise independent of
    /// row order; used where the inner axis is a sequence axis that
    /// permutation-equivariance tests shuffle.
    pub fn matmul_exact(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: NodeId, b: NodeId, exact: bool) -> Result<NodeId> {
        let (m, k) = self.dims2(a)?;
        let (k2, n) = self.dims2(b)?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul inner dimensions disagree: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let ad = self.data(a);
        let bd = self.data(b);
        let mut data = vec![0.0; m * n];
        if exact {
            let mut scratch = Vec::with_capacity(8);
            for i in 0..m {
                for j in 0..n {
                    data[i * n + j] = exact_sum_with(
                        (0..k).map(|p| ad[i * k + p] * bd[p * n + j]),
                        &mut scratch,
                    );
                }
            }
        } else {
            for i in 0..m {
                for p in 0..k {
                    let aip = ad[i * k + p];
                    if aip == 0.0 {
                        continue;
                    }
                    for j in 0..n {
                        data[i * n + j] += aip * bd[p * n + j];
                    }
                }
            }
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Matmul { a, b }, vec![m, n], data, needs))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let (m, n) = self.dims2(x)?;
        let xd = self.data(x);
        let mut data = vec![0.0; m * n];
        for r in 0..m {
            for c in 0..n {
                data[c * m + r] = xd[r * n + c];
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Op::Transpose(x), vec![n, m], data, needs))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let n: usize = shape.iter().product();
        if n != self.data(x).len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} ({} elements) to {:?} ({} elements)",
                self.shape(x),
                self.data(x).len(),
                shape,
                n
            )));
        }
        let data = self.data(x).to_vec();
        let needs = self.needs(x);
        Ok(self.push(Op::Reshape(x), shape.to_vec(), data, needs))
    }

    /// Concatenates rank-2 inputs along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId> {
        if inputs.is_empty() {
            return Err(Error::Contract("concat requires at least one input".into()));
        }
        if axis > 1 {
            return Err(Error::Config(format!("concat axis must be 0 or 1, got {}", axis)));
        }
        let mut dims: Vec<(usize, usize)> = Vec::with_capacity(inputs.len());
        for &i in inputs {
            dims.push(self.dims2(i)?);
        }
        let other = 1 - axis;
        let fixed = [dims[0].0, dims[0].1][other];
        for (idx, d) in dims.iter().enumerate() {
            if [d.0, d.1][other] != fixed {
                return Err(Error::Shape(format!(
                    "concat along axis {} requires equal non-concat extents: input 0 is {:?}, input {} is {:?}",
                    axis,
                    self.shape(inputs[0]),
                    idx,
                    self.shape(inputs[idx])
                )));
            }
        }
        let (rows, cols);
        let mut data;
        if axis == 0 {
            rows = dims.iter().map(|d| d.0).sum();
            cols = fixed;
            data = Vec::with_capacity(rows * cols);
            for &i in inputs {
                data.extend_from_slice(self.data(i));
            }
        } else {
            rows = fixed;
            cols = dims.iter().map(|d| d.1).sum();
            data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for (&i, d) in inputs.iter().zip(&dims) {
                    let w = d.1;
                    data.extend_from_slice(&self.data(i)[r * w..(r + 1) * w]);
                }
            }
        }
        let needs = inputs.iter().any(|&i| self.needs(i));
        Ok(self.push(Op::Concat { inputs: inputs.to_vec(), axis }, vec![rows, cols], data, needs))
    }

    /// Columns `[start, start + len)` of a rank-2 tensor.
    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (m, n) = self.dims2(x)?;
        if start + len > n {
            return Err(Error::Shape(format!(
                "column slice [{}, {}) out of range for shape {:?}",
                start,
                start + len,
                self.shape(x)
            )));
        }
        let xd = self.data(x);
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&xd[r * n + start..r * n + start + len]);
        }
        let needs = self.needs(x);
        Ok(self.push(Op::SliceCols { x, start }, vec![m, len], data, needs))
    }

    /// Sets every element of columns with `mask[j] == false` to `-inf`;
    /// feeding the result to [`Tape::softmax_rows`] gives those columns an
    /// attention weight of exactly zero.
    pub fn mask_fill_cols(&mut self, x: NodeId, mask: &[bool]) -> Result<NodeId> {
        let (m, n) = self.dims2(x)?;
        if mask.len() != n {
            return Err(Error::Shape(format!(
                "mask length {} does not match {} columns",
                mask.len(),
                n
            )));
        }
        let xd = self.data(x);
        let mut data = Vec::with_capacity(m * n);
        for r in 0..m {
            for c in 0..n {
                data.push(if mask[c] { xd[r * n + c] } else { f64::NEG_INFINITY });
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Op::MaskFillCols { x, mask: mask.to_vec() }, vec![m, n], data, needs))
    }

    /// Row-wise softmax with max-subtraction; row sums use exact summation so
    /// they are bitwise independent of column order.
    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (m, n) = self.dims2(x)?;
        let xd = self.data(x);
        let mut data = vec![0.0; m * n];
        let mut scratch = Vec::with_capacity(8);
        for r in 0..m {
            let row = &xd[r * n..(r + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if !max.is_finite() {
                return Err(Error::Contract(
                    "softmax row has no finite entry (all positions masked?)".into(),
                ));
            }
            let out = &mut data[r * n..(r + 1) * n];
            for (o, v) in out.iter_mut().zip(row) {
                *o = (v - max).exp();
            }
            let sum = exact_sum_with(out.iter().copied(), &mut scratch);
            for o in out.iter_mut() {
                *o /= sum;
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Op::SoftmaxRows(x), vec![m, n], data, needs))
    }

    /// Per-row standardization followed by the `gamma`/`beta` affine map.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        let (m, n) = self.dims2(x)?;
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(Error::Shape(format!(
                "layer_norm over {} columns requires gamma/beta of shape [{}], got {:?} and {:?}",
                n,
                n,
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        if eps <= 0.0 {
            return Err(Error::Config(format!("layer_norm eps must be positive, got {}", eps)));
        }
        let xd = self.data(x);
        let gd = self.data(gamma);
        let bd = self.data(beta);
        let mut data = vec![0.0; m * n];
        for r in 0..m {
            let row = &xd[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for c in 0..n {
                data[r * n + c] = gd[c] * ((row[c] - mean) * inv) + bd[c];
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(Op::LayerNorm { x, gamma, beta, eps }, vec![m, n], data, needs))
    }

    pub fn selu(&mut self, x: NodeId) -> NodeId {
        let data: Vec<f64> = self.data(x).iter().map(|&v| selu_scalar(v)).collect();
        let needs = self.needs(x);
        self.push(Op::Selu(x), self.nodes[x.0].shape.clone(), data, needs)
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let data: Vec<f64> = self.data(x).iter().map(|&v| gelu_scalar(v)).collect();
        let needs = self.needs(x);
        self.push(Op::Gelu(x), self.nodes[x.0].shape.clone(), data, needs)
    }

    /// Inverted dropout: in train mode each element is zeroed with
    /// probability `p` and survivors are scaled by `1/(1-p)`; eval mode is the
    /// identity and draws nothing from `rng`.
    pub fn dropout<R: Rng>(
        &mut self,
        x: NodeId,
        p: f64,
        mode: Mode,
        rng: &mut R,
    ) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!(
                "dropout probability must satisfy 0 <= p < 1, got {}",
                p
            )));
        }
        if mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let scale: Vec<f64> = (0..self.data(x).len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data: Vec<f64> = self.data(x).iter().zip(&scale).map(|(v, s)| v * s).collect();
        let needs = self.needs(x);
        Ok(self.push(Op::Dropout { x, scale }, self.nodes[x.0].shape.clone(), data, needs))
    }

    /// Dimension-wise maximum over the rows of `x: [t, d]` where `keep` is
    /// true, yielding `[1, d]`. Gradient flows to the first row attaining
    /// each maximum.
    pub fn max_pool_rows(&mut self, x: NodeId, keep: &[bool]) -> Result<NodeId> {
        let (t, d) = self.dims2(x)?;
        if keep.len() != t {
            return Err(Error::Shape(format!(
                "pool mask length {} does not match {} rows",
                keep.len(),
                t
            )));
        }
        if !keep.iter().any(|&k| k) {
            return Err(Error::Contract("max pool over zero unmasked rows".into()));
        }
        let xd = self.data(x);
        let mut data = vec![f64::NEG_INFINITY; d];
        for (r, &k) in keep.iter().enumerate() {
            if !k {
                continue;
            }
            for c in 0..d {
                let v = xd[r * d + c];
                if v > data[c] {
                    data[c] = v;
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Op::MaxPoolRows { x, keep: keep.to_vec() }, vec![1, d], data, needs))
    }

    /// Gathers `table[id]` rows; gradient scatter-adds back (repeated ids
    /// accumulate).
    pub fn embedding_lookup(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (v, d) = self.dims2(table)?;
        if ids.is_empty() {
            return Err(Error::Contract("embedding lookup of zero ids".into()));
        }
        for &id in ids {
            if id >= v {
                return Err(Error::Index(format!(
                    "id {} out of range for table of {} rows",
                    id, v
                )));
            }
        }
        let td = self.data(table);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            data.extend_from_slice(&td[id * d..(id + 1) * d]);
        }
        let needs = self.needs(table);
        Ok(self.push(Op::EmbeddingLookup { table, ids: ids.to_vec() }, vec![ids.len(), d], data, needs))
    }

    /// Sum of all elements, as a rank-0 node.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.data(x).iter().sum();
        let needs = self.needs(x);
        self.push(Op::Sum(x), vec![], vec![s], needs)
    }

    /// Elementwise `log(max(x, PROB_FLOOR))` in the given base; the gradient
    /// is zero in the clamped region.
    pub fn log_clamped(&mut self, x: NodeId, base: LogBase) -> NodeId {
        let data: Vec<f64> = self
            .data(x)
            .iter()
            .map(|&v| {
                let c = v.max(PROB_FLOOR);
                match base {
                    LogBase::Two => c.log2(),
                    LogBase::Natural => c.ln(),
                }
            })
            .collect();
        let needs = self.needs(x);
        self.push(Op::LogClamped { x, base }, self.nodes[x.0].shape.clone(), data, needs)
    }

    // ── reverse pass ────────────────────────────────────────────────────────

    /// Gradient of the scalar node `loss` with respect to every node.
    ///
    /// The tape itself is unchanged; each call replays from scratch, so the
    /// caller controls accumulation by how it applies the result (applying the
    /// same pass twice adds exactly twice the gradient).
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut g: Vec<Vec<f64>> = self.nodes.iter().map(|n| vec![0.0; n.data.len()]).collect();
        if self.nodes[loss.0].needs_grad {
            g[loss.0][0] = 1.0;
        }
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let dy = std::mem::take(&mut g[i]);
            self.propagate(i, &dy, &mut g);
            g[i] = dy;
        }
        Ok(Gradients { g })
    }

    fn propagate(&self, i: usize, dy: &[f64], g: &mut [Vec<f64>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                if self.needs(*a) {
                    for (ga, d) in g[a.0].iter_mut().zip(dy) {
                        *ga += d;
                    }
                }
                if self.needs(*b) {
                    for (gb, d) in g[b.0].iter_mut().zip(dy) {
                        *gb += d;
                    }
                }
            }
            Op::AddRowBroadcast(x, v) => {
                let n = self.nodes[v.0].data.len();
                if self.needs(*x) {
                    for (gx, d) in g[x.0].iter_mut().zip(dy) {
                        *gx += d;
                    }
                }
                if self.needs(*v) {
                    for (idx, d) in dy.iter().enumerate() {
                        g[v.0][idx % n] += d;
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let bd = self.data(*b);
                    for ((ga, d), bv) in g[a.0].iter_mut().zip(dy).zip(bd) {
                        *ga += d * bv;
                    }
                }
                if self.needs(*b) {
                    let ad = self.data(*a);
                    for ((gb, d), av) in g[b.0].iter_mut().zip(dy).zip(ad) {
                        *gb += d * av;
                    }
                }
            }
            Op::Scale(a, c) => {
                if self.needs(*a) {
                    for (ga, d) in g[a.0].iter_mut().zip(dy) {
                        *ga += d * c;
                    }
                }
            }
            Op::Matmul { a, b } => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                if self.needs(*a) {
                    // dA = dY · B^T
                    let bd = self.data(*b);
                    let ga = &mut g[a.0];
                    for i2 in 0..m {
                        for j in 0..n {
                            let d = dy[i2 * n + j];
                            if d == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                ga[i2 * k + p] += d * bd[p * n + j];
                            }
                        }
                    }
                }
                if self.needs(*b) {
                    // dB = A^T · dY
                    let ad = self.data(*a);
                    let gb = &mut g[b.0];
                    for i2 in 0..m {
                        for p in 0..k {
                            let av = ad[i2 * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                gb[p * n + j] += av * dy[i2 * n + j];
                            }
                        }
                    }
                }
            }
            Op::Transpose(x) => {
                if self.needs(*x) {
                    let (n, m) = (node.shape[0], node.shape[1]); // output is [n, m]
                    let gx = &mut g[x.0];
                    for r in 0..n {
                        for c in 0..m {
                            gx[c * n + r] += dy[r * m + c];
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if self.needs(*x) {
                    for (gx, d) in g[x.0].iter_mut().zip(dy) {
                        *gx += d;
                    }
                }
            }
            Op::Sum(x) => {
                if self.needs(*x) {
                    let d = dy[0];
                    for gx in g[x.0].iter_mut() {
                        *gx += d;
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                if *axis == 0 {
                    let mut offset = 0;
                    for &inp in inputs {
                        let len = self.nodes[inp.0].data.len();
                        if self.needs(inp) {
                            for (gx, d) in g[inp.0].iter_mut().zip(&dy[offset..offset + len]) {
                                *gx += d;
                            }
                        }
                        offset += len;
                    }
                } else {
                    let rows = node.shape[0];
                    let total = node.shape[1];
                    let mut start = 0;
                    for &inp in inputs {
                        let w = self.nodes[inp.0].shape[1];
                        if self.needs(inp) {
                            let gx = &mut g[inp.0];
                            for r in 0..rows {
                                for c in 0..w {
                                    gx[r * w + c] += dy[r * total + start + c];
                                }
                            }
                        }
                        start += w;
                    }
                }
            }
            Op::SliceCols { x, start } => {
                if self.needs(*x) {
                    let n = self.nodes[x.0].shape[1];
                    let (m, len) = (node.shape[0], node.shape[1]);
                    let gx = &mut g[x.0];
                    for r in 0..m {
                        for c in 0..len {
                            gx[r * n + start + c] += dy[r * len + c];
                        }
                    }
                }
            }
            Op::MaskFillCols { x, mask } => {
                if self.needs(*x) {
                    let n = node.shape[1];
                    let gx = &mut g[x.0];
                    for (idx, d) in dy.iter().enumerate() {
                        if mask[idx % n] {
                            gx[idx] += d;
                        }
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                if self.needs(*x) {
                    let (m, n) = (node.shape[0], node.shape[1]);
                    let p = &node.data;
                    let gx = &mut g[x.0];
                    for r in 0..m {
                        let dyr = &dy[r * n..(r + 1) * n];
                        let pr = &p[r * n..(r + 1) * n];
                        let dot: f64 = dyr.iter().zip(pr).map(|(d, pv)| d * pv).sum();
                        for c in 0..n {
                            gx[r * n + c] += pr[c] * (dyr[c] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let (m, n) = (node.shape[0], node.shape[1]);
                let xd = self.data(*x);
                let gd = self.data(*gamma);
                for r in 0..m {
                    let row = &xd[r * n..(r + 1) * n];
                    let dyr = &dy[r * n..(r + 1) * n];
                    let mean = row.iter().sum::<f64>() / n as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    if self.needs(*gamma) || self.needs(*beta) {
                        for c in 0..n {
                            let xhat = (row[c] - mean) * inv;
                            if self.needs(*gamma) {
                                g[gamma.0][c] += dyr[c] * xhat;
                            }
                            if self.needs(*beta) {
                                g[beta.0][c] += dyr[c];
                            }
                        }
                    }
                    if self.needs(*x) {
                        let mut mean_dxhat = 0.0;
                        let mut mean_dxhat_xhat = 0.0;
                        for c in 0..n {
                            let xhat = (row[c] - mean) * inv;
                            let dxhat = dyr[c] * gd[c];
                            mean_dxhat += dxhat;
                            mean_dxhat_xhat += dxhat * xhat;
                        }
                        mean_dxhat /= n as f64;
                        mean_dxhat_xhat /= n as f64;
                        let gx = &mut g[x.0];
                        for c in 0..n {
                            let xhat = (row[c] - mean) * inv;
                            let dxhat = dyr[c] * gd[c];
                            gx[r * n + c] += inv * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                        }
                    }
                }
            }
            Op::Selu(x) => {
                if self.needs(*x) {
                    let xd = self.data(*x);
                    for ((gx, d), v) in g[x.0].iter_mut().zip(dy).zip(xd) {
                        *gx += d * selu_deriv(*v);
                    }
                }
            }
            Op::Gelu(x) => {
                if self.needs(*x) {
                    let xd = self.data(*x);
                    for ((gx, d), v) in g[x.0].iter_mut().zip(dy).zip(xd) {
                        *gx += d * gelu_deriv(*v);
                    }
                }
            }
            Op::Dropout { x, scale } => {
                if self.needs(*x) {
                    for ((gx, d), s) in g[x.0].iter_mut().zip(dy).zip(scale) {
                        *gx += d * s;
                    }
                }
            }
            Op::MaxPoolRows { x, keep } => {
                if self.needs(*x) {
                    let d = node.shape[1];
                    let xd = self.data(*x);
                    let gx = &mut g[x.0];
                    for c in 0..d {
                        // First kept row attaining the maximum, mirroring the
                        // strict-improvement scan of the forward pass.
                        let mut best = f64::NEG_INFINITY;
                        let mut best_row = 0;
                        for (r, &k) in keep.iter().enumerate() {
                            if !k {
                                continue;
                            }
                            let v = xd[r * d + c];
                            if v > best {
                                best = v;
                                best_row = r;
                            }
                        }
                        gx[best_row * d + c] += dy[c];
                    }
                }
            }
            Op::EmbeddingLookup { table, ids } => {
                if self.needs(*table) {
                    let d = node.shape[1];
                    let gt = &mut g[table.0];
                    for (t, &id) in ids.iter().enumerate() {
                        for c in 0..d {
                            gt[id * d + c] += dy[t * d + c];
                        }
                    }
                }
            }
            Op::LogClamped { x, base } => {
                if self.needs(*x) {
                    let xd = self.data(*x);
                    let denom_scale = match base {
                        LogBase::Two => std::f64::consts::LN_2,
                        LogBase::Natural => 1.0,
                    };
                    for ((gx, d), v) in g[x.0].iter_mut().zip(dy).zip(xd) {
                        if *v >= PROB_FLOOR {
                            *gx += d / (v * denom_scale);
                        }
                    }
                }
            }
        }
    }
}
