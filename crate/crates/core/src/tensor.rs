//! Dense arrays and reverse-mode automatic differentiation.
//!
//! A [`Tape`] records primitive operations during the forward pass and
//! replays them in reverse to compute gradients. The op set is exactly what
//! the toy transformer needs, nothing more. All reductions run in a fixed
//! left-to-right order over row-major storage, so repeated runs are
//! bit-identical.
//!
//! Layer-output gradient capture: callers register layer ids on the tape
//! before the forward pass; the forward pass marks the node that holds each
//! registered layer's output, and `backward` stores a copy of that node's
//! gradient in [`Tape::captures`].

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};

/// Epsilon used by the last-axis normalization op.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Additive mask value for disallowed attention positions.
const CAUSAL_MASK_VALUE: f64 = -1e30;

// ── Array ────────────────────────────────────────────────────────────

/// Storage precision tag. Values are always held as f64; `Single` arrays
/// round every published result onto the f32 grid, which keeps one code
/// path while still modelling a single-precision pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Precision {
    Single,
    Double,
}

/// Dense row-major array of reals.
#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    shape: Vec<usize>,
    data: Vec<f64>,
    precision: Precision,
}

impl Array {
    pub fn new(shape: Vec<usize>, data: Vec<f64>, precision: Precision) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        let mut a = Array { shape, data, precision };
        a.round_to_precision();
        Ok(a)
    }

    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        Array::new(shape, data, Precision::Double)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Array {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
            precision: Precision::Double,
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Array {
            shape: shape.to_vec(),
            data: vec![value; numel],
            precision: Precision::Double,
        }
    }

    pub fn scalar_value(value: f64) -> Self {
        Array {
            shape: vec![1],
            data: vec![value],
            precision: Precision::Double,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn with_precision(mut self, p: Precision) -> Self {
        self.precision = p;
        self.round_to_precision();
        self
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Value of a one-element array.
    pub fn scalar(&self) -> f64 {
        assert_eq!(self.numel(), 1, "scalar() on array of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reinterpret the flat data under a new shape of equal length.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Array> {
        Array::new(shape, self.data.clone(), self.precision)
    }

    fn round_to_precision(&mut self) {
        if self.precision == Precision::Single {
            for v in &mut self.data {
                *v = *v as f32 as f64;
            }
        }
    }
}

fn combine_precision(a: Precision, b: Precision) -> Precision {
    if a == Precision::Single || b == Precision::Single {
        Precision::Single
    } else {
        Precision::Double
    }
}

// ── Raw matmul kernels ───────────────────────────────────────────────
// 2-D kernels over flat slices; batched ops loop over leading dims.

/// c[m,n] += a[m,k] * b[k,n]
fn mm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

/// c[m,n] += a[m,k] * b[n,k]^T  (row-dot-row; cache friendly)
fn mm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for p in 0..k {
                s += arow[p] * brow[p];
            }
            crow[j] += s;
        }
    }
}

/// c[k,n] += a[m,k]^T * b[m,n]
fn mm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let crow = &mut c[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

// ── Tape ─────────────────────────────────────────────────────────────

pub type NodeId = usize;

/// Recorded output gradient for one registered layer.
#[derive(Clone, Debug)]
pub struct GradCaptureBlock {
    pub layer_id: String,
    /// Gradient of the loss w.r.t. the layer output, shaped (batch, seq, d).
    pub grads: Array,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    /// out = a @ b over matching leading batch dims
    Matmul { a: NodeId, b: NodeId },
    /// out = a @ b^T (transpose of the last two axes of b)
    MatmulNT { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    /// a (.., d) + bias (d)
    AddBias { a: NodeId, bias: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { a: NodeId, c: f64 },
    Relu { a: NodeId },
    /// softmax over the last axis
    Softmax { a: NodeId },
    /// last-axis normalization with learned scale/shift
    LayerNorm { a: NodeId, gamma: NodeId, beta: NodeId },
    /// row lookup: out[i] = table[ids[i]]
    Embed { table: NodeId, ids: Vec<usize> },
    Reshape { a: NodeId },
    Permute { a: NodeId, perm: Vec<usize> },
    /// out[b, :] = a[b, pos, :]
    SelectPos { a: NodeId, pos: usize },
    /// out[b, j] = a[b, cols[j]]
    GatherCols { a: NodeId, cols: Vec<usize> },
    /// adds -inf above the diagonal of the last two axes
    CausalMask { a: NodeId },
    /// mean of -log softmax(logits)[target] over rows with target >= 0
    CrossEntropy { logits: NodeId, targets: Vec<i64> },
    SumAll { a: NodeId },
    /// out = base with out[row] += u[group] for each (row, group)
    ScatterRowsAdd { base: NodeId, u: NodeId, rows: Vec<(usize, usize)> },
}

struct Node {
    value: Array,
    op: Op,
    /// true when this node lies on a path from a grad-requiring leaf (or is
    /// itself marked for capture), so backward must materialize its gradient
    needs: bool,
    grad: Option<Array>,
}

/// Records a forward pass and computes gradients in reverse.
pub struct Tape {
    nodes: Vec<Node>,
    registered: BTreeSet<String>,
    capture_nodes: BTreeMap<String, (NodeId, Vec<usize>)>,
    captures: BTreeMap<String, GradCaptureBlock>,
    ran_backward: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            registered: BTreeSet::new(),
            capture_nodes: BTreeMap::new(),
            captures: BTreeMap::new(),
            ran_backward: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Array {
        &self.nodes[id].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Array> {
        self.nodes[id].grad.as_ref()
    }

    // ── capture registration ─────────────────────────────────────────

    /// Enable output-gradient capture for a layer id. Idempotent.
    pub fn enable_capture(&mut self, layer_id: &str) {
        self.registered.insert(layer_id.to_string());
    }

    pub fn registered_captures(&self) -> &BTreeSet<String> {
        &self.registered
    }

    /// Called by the model forward pass: associates a registered layer id
    /// with the node holding its output. `block_shape` is the (B, T, d)
    /// view of that output. No-op for unregistered ids.
    pub fn mark_capture(&mut self, layer_id: &str, node: NodeId, block_shape: Vec<usize>) {
        if self.registered.contains(layer_id) {
            self.nodes[node].needs = true;
            self.capture_nodes
                .insert(layer_id.to_string(), (node, block_shape));
        }
    }

    /// Captured gradient blocks from the most recent backward pass.
    pub fn captures(&self) -> &BTreeMap<String, GradCaptureBlock> {
        &self.captures
    }

    /// Forward values of marked capture nodes, reshaped to (B, T, d).
    /// Available before backward; used by activation-based attribution.
    pub fn capture_values(&self) -> BTreeMap<String, Array> {
        let mut out = BTreeMap::new();
        for (id, (node, shape)) in &self.capture_nodes {
            let v = self.nodes[*node]
                .value
                .reshaped(shape.clone())
                .expect("capture shape mismatch");
            out.insert(id.clone(), v);
        }
        out
    }

    pub fn capture_node_ids(&self) -> BTreeMap<String, NodeId> {
        self.capture_nodes
            .iter()
            .map(|(k, (n, _))| (k.clone(), *n))
            .collect()
    }

    // ── node construction ────────────────────────────────────────────

    fn push(&mut self, value: Array, op: Op, needs: bool) -> NodeId {
        debug_assert!(
            value.is_finite(),
            "non-finite value published by {:?}",
            op_name(&op)
        );
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            needs,
            grad: None,
        });
        id
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id].needs
    }

    pub fn leaf(&mut self, value: Array, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Array) -> NodeId {
        self.leaf(value, false)
    }

    /// Batched matrix product: (.., m, k) x (.., k, n) -> (.., m, n).
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (lead, m, k) = split_matrix_shape(self.value(a).shape())?;
        let (lead_b, kb, n) = split_matrix_shape(self.value(b).shape())?;
        if k != kb || lead != lead_b {
            return Err(Error::Shape(format!(
                "matmul {:?} x {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let batch: usize = lead.iter().product();
        let mut out = vec![0.0; batch * m * n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for t in 0..batch {
            mm_nn(
                &av[t * m * k..(t + 1) * m * k],
                &bv[t * k * n..(t + 1) * k * n],
                &mut out[t * m * n..(t + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let mut shape = lead;
        shape.extend([m, n]);
        let prec = combine_precision(self.value(a).precision(), self.value(b).precision());
        let value = Array::new(shape, out, prec)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Matmul { a, b }, needs))
    }

    /// Batched product with the second operand transposed on its last two
    /// axes: (.., m, k) x (.., n, k) -> (.., m, n).
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (lead, m, k) = split_matrix_shape(self.value(a).shape())?;
        let (lead_b, n, kb) = split_matrix_shape(self.value(b).shape())?;
        let batch_broadcast = lead_b.is_empty() && !lead.is_empty();
        if k != kb || (lead != lead_b && !batch_broadcast) {
            return Err(Error::Shape(format!(
                "matmul_nt {:?} x {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let batch: usize = lead.iter().product();
        let mut out = vec![0.0; batch * m * n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for t in 0..batch {
            let bslice = if batch_broadcast { bv } else { &bv[t * n * k..(t + 1) * n * k] };
            mm_nt(
                &av[t * m * k..(t + 1) * m * k],
                bslice,
                &mut out[t * m * n..(t + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let mut shape = lead;
        shape.extend([m, n]);
        let prec = combine_precision(self.value(a).precision(), self.value(b).precision());
        let value = Array::new(shape, out, prec)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatmulNT { a, b }, needs))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape(format!(
                "add {:?} + {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let prec = combine_precision(self.value(a).precision(), self.value(b).precision());
        let value = Array::new(self.value(a).shape().to_vec(), data, prec)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add { a, b }, needs))
    }

    /// a (.., d) + bias (d), broadcast over leading axes.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let d = *self
            .value(a)
            .shape()
            .last()
            .ok_or_else(|| Error::Shape("add_bias on 0-d array".into()))?;
        if self.value(bias).shape() != [d] {
            return Err(Error::Shape(format!(
                "add_bias {:?} + {:?}",
                self.value(a).shape(),
                self.value(bias).shape()
            )));
        }
        let bv = self.value(bias).data().to_vec();
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + bv[i % d])
            .collect();
        let prec = combine_precision(self.value(a).precision(), self.value(bias).precision());
        let value = Array::new(self.value(a).shape().to_vec(), data, prec)?;
        let needs = self.needs(a) || self.needs(bias);
        Ok(self.push(value, Op::AddBias { a, bias }, needs))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape(format!(
                "mul {:?} * {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let prec = combine_precision(self.value(a).precision(), self.value(b).precision());
        let value = Array::new(self.value(a).shape().to_vec(), data, prec)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Mul { a, b }, needs))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let data: Vec<f64> = self.value(a).data().iter().map(|x| x * c).collect();
        let value =
            Array::new(self.value(a).shape().to_vec(), data, self.value(a).precision()).unwrap();
        let needs = self.needs(a);
        self.push(value, Op::Scale { a, c }, needs)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let data: Vec<f64> = self.value(a).data().iter().map(|x| x.max(0.0)).collect();
        let value =
            Array::new(self.value(a).shape().to_vec(), data, self.value(a).precision()).unwrap();
        let needs = self.needs(a);
        self.push(value, Op::Relu { a }, needs)
    }

    /// Softmax over the last axis; rows sum to 1.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let d = *self
            .value(a)
            .shape()
            .last()
            .ok_or_else(|| Error::Shape("softmax on 0-d array".into()))?;
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(d) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let value = Array::new(
            self.value(a).shape().to_vec(),
            data,
            self.value(a).precision(),
        )?;
        let needs = self.needs(a);
        Ok(self.push(value, Op::Softmax { a }, needs))
    }

    /// Last-axis normalization: (x - mean) / sqrt(var + eps) * gamma + beta.
    pub fn layer_norm(&mut self, a: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let d = *self
            .value(a)
            .shape()
            .last()
            .ok_or_else(|| Error::Shape("layer_norm on 0-d array".into()))?;
        if self.value(gamma).shape() != [d] || self.value(beta).shape() != [d] {
            return Err(Error::Shape("layer_norm scale/shift must have shape (d)".into()));
        }
        let gv = self.value(gamma).data().to_vec();
        let bv = self.value(beta).data().to_vec();
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv * gv[j] + bv[j];
            }
        }
        let prec = combine_precision(
            self.value(a).precision(),
            combine_precision(self.value(gamma).precision(), self.value(beta).precision()),
        );
        let value = Array::new(self.value(a).shape().to_vec(), data, prec)?;
        let needs = self.needs(a) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(value, Op::LayerNorm { a, gamma, beta }, needs))
    }

    /// Row lookup into a (rows, d) table: output shape is lead + [d].
    pub fn embed(&mut self, table: NodeId, ids: &[usize], lead: Vec<usize>) -> Result<NodeId> {
        let tshape = self.value(table).shape();
        if tshape.len() != 2 {
            return Err(Error::Shape("embed table must be 2-d".into()));
        }
        let (rows, d) = (tshape[0], tshape[1]);
        let expected: usize = lead.iter().product();
        if expected != ids.len() {
            return Err(Error::Shape(format!(
                "embed lead {:?} vs {} ids",
                lead,
                ids.len()
            )));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        let tv = self.value(table).data();
        for &id in ids {
            if id >= rows {
                return Err(Error::Index(format!("embed id {id} >= table rows {rows}")));
            }
            data.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let mut shape = lead.clone();
        shape.push(d);
        let value = Array::new(shape, data, self.value(table).precision())?;
        let needs = self.needs(table);
        Ok(self.push(
            value,
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
            needs,
        ))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let value = self.value(a).reshaped(shape)?;
        let needs = self.needs(a);
        Ok(self.push(value, Op::Reshape { a }, needs))
    }

    /// Axis permutation, e.g. perm [0,2,1,3] swaps the middle axes.
    pub fn permute(&mut self, a: NodeId, perm: &[usize]) -> Result<NodeId> {
        let in_shape = self.value(a).shape().to_vec();
        if perm.len() != in_shape.len() {
            return Err(Error::Shape("permute rank mismatch".into()));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
        let data = permute_data(self.value(a).data(), &in_shape, perm);
        let value = Array::new(out_shape, data, self.value(a).precision())?;
        let needs = self.needs(a);
        Ok(self.push(
            value,
            Op::Permute {
                a,
                perm: perm.to_vec(),
            },
            needs,
        ))
    }

    /// Select one position along the middle axis of (B, T, d) -> (B, d).
    pub fn select_pos(&mut self, a: NodeId, pos: usize) -> Result<NodeId> {
        let s = self.value(a).shape();
        if s.len() != 3 {
            return Err(Error::Shape(format!("select_pos expects rank 3, got {s:?}")));
        }
        let (b, t, d) = (s[0], s[1], s[2]);
        if pos >= t {
            return Err(Error::Index(format!("select_pos {pos} >= {t}")));
        }
        let av = self.value(a).data();
        let mut data = Vec::with_capacity(b * d);
        for bi in 0..b {
            let base = (bi * t + pos) * d;
            data.extend_from_slice(&av[base..base + d]);
        }
        let value = Array::new(vec![b, d], data, self.value(a).precision())?;
        let needs = self.needs(a);
        Ok(self.push(value, Op::SelectPos { a, pos }, needs))
    }

    /// Column gather on a (B, C) array.
    pub fn gather_cols(&mut self, a: NodeId, cols: &[usize]) -> Result<NodeId> {
        let s = self.value(a).shape();
        if s.len() != 2 {
            return Err(Error::Shape(format!("gather_cols expects rank 2, got {s:?}")));
        }
        let (b, c) = (s[0], s[1]);
        for &col in cols {
            if col >= c {
                return Err(Error::Index(format!("gather col {col} >= {c}")));
            }
        }
        let av = self.value(a).data();
        let mut data = Vec::with_capacity(b * cols.len());
        for bi in 0..b {
            for &col in cols {
                data.push(av[bi * c + col]);
            }
        }
        let value = Array::new(vec![b, cols.len()], data, self.value(a).precision())?;
        let needs = self.needs(a);
        Ok(self.push(
            value,
            Op::GatherCols {
                a,
                cols: cols.to_vec(),
            },
            needs,
        ))
    }

    /// Mask future positions in (.., T, T) attention scores.
    pub fn causal_mask(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.value(a).shape().to_vec();
        if s.len() < 2 || s[s.len() - 1] != s[s.len() - 2] {
            return Err(Error::Shape(format!("causal_mask expects (.., T, T), got {s:?}")));
        }
        let t = s[s.len() - 1];
        let mut data = self.value(a).data().to_vec();
        for block in data.chunks_mut(t * t) {
            for i in 0..t {
                for j in (i + 1)..t {
                    block[i * t + j] += CAUSAL_MASK_VALUE;
                }
            }
        }
        let value = Array::new(s, data, self.value(a).precision())?;
        let needs = self.needs(a);
        Ok(self.push(value, Op::CausalMask { a }, needs))
    }

    /// Mean cross-entropy of (N, C) logits against integer targets.
    /// Targets of -1 are ignored (masked out of the mean).
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[i64]) -> Result<NodeId> {
        let s = self.value(logits).shape();
        if s.len() != 2 {
            return Err(Error::Shape(format!("cross_entropy expects rank 2, got {s:?}")));
        }
        let (n, c) = (s[0], s[1]);
        if targets.len() != n {
            return Err(Error::Shape(format!(
                "cross_entropy {n} rows vs {} targets",
                targets.len()
            )));
        }
        let mut counted = 0usize;
        for &t in targets {
            if t >= 0 {
                if t as usize >= c {
                    return Err(Error::Index(format!("target {t} >= classes {c}")));
                }
                counted += 1;
            }
        }
        if counted == 0 {
            return Err(Error::Contract("cross_entropy with no live targets".into()));
        }
        let lv = self.value(logits).data();
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            if t < 0 {
                continue;
            }
            let row = &lv[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            total += lse - row[t as usize];
        }
        let value = Array::scalar_value(total / counted as f64)
            .with_precision(self.value(logits).precision());
        let needs = self.needs(logits);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
            needs,
        ))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let total: f64 = self.value(a).data().iter().sum();
        let value = Array::scalar_value(total).with_precision(self.value(a).precision());
        let needs = self.needs(a);
        self.push(value, Op::SumAll { a }, needs)
    }

    /// base (R, C) with u rows scattered in: out[row] = base[row] + u[group]
    /// for each (row, group) pair; untouched rows are copied bit-exactly.
    pub fn scatter_rows_add(
        &mut self,
        base: NodeId,
        u: NodeId,
        rows: &[(usize, usize)],
    ) -> Result<NodeId> {
        let bs = self.value(base).shape();
        let us = self.value(u).shape();
        if bs.len() != 2 || us.len() != 2 || bs[1] != us[1] {
            return Err(Error::Shape(format!("scatter_rows_add {bs:?} with {us:?}")));
        }
        let (r, c, g) = (bs[0], bs[1], us[0]);
        for &(row, group) in rows {
            if row >= r || group >= g {
                return Err(Error::Index(format!(
                    "scatter row {row}/{r} group {group}/{g}"
                )));
            }
        }
        let mut data = self.value(base).data().to_vec();
        let uv = self.value(u).data();
        for &(row, group) in rows {
            for j in 0..c {
                data[row * c + j] += uv[group * c + j];
            }
        }
        let prec = combine_precision(self.value(base).precision(), self.value(u).precision());
        let value = Array::new(vec![r, c], data, prec)?;
        let needs = self.needs(base) || self.needs(u);
        Ok(self.push(
            value,
            Op::ScatterRowsAdd {
                base,
                u,
                rows: rows.to_vec(),
            },
            needs,
        ))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss node. Populates gradients for every
    /// node on a path to a grad-requiring leaf and records one
    /// [`GradCaptureBlock`] per registered-and-marked layer id.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss].grad = Some(Array::scalar_value(1.0));

        for id in (0..self.nodes.len()).rev() {
            let grad = match self.nodes[id].grad.take() {
                Some(g) => g,
                None => continue,
            };
            let op = self.nodes[id].op.clone();
            self.propagate(id, &op, &grad)?;
            self.nodes[id].grad = Some(grad);
        }

        self.captures.clear();
        let capture_nodes = self.capture_nodes.clone();
        for (layer_id, (node, block_shape)) in capture_nodes {
            let grads = match &self.nodes[node].grad {
                Some(g) => g.reshaped(block_shape.clone())?,
                None => Array::zeros(&block_shape),
            };
            self.captures.insert(
                layer_id.clone(),
                GradCaptureBlock { layer_id, grads },
            );
        }
        self.ran_backward = true;
        Ok(())
    }

    fn accum(&mut self, target: NodeId, delta: Array) {
        if !self.nodes[target].needs {
            return;
        }
        match &mut self.nodes[target].grad {
            Some(g) => {
                debug_assert_eq!(g.shape(), delta.shape());
                for (gv, dv) in g.data_mut().iter_mut().zip(delta.data()) {
                    *gv += dv;
                }
            }
            None => self.nodes[target].grad = Some(delta),
        }
    }

    fn propagate(&mut self, out: NodeId, op: &Op, grad: &Array) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                // dA = dC @ B^T ; dB = A^T @ dC
                let (lead, m, k) = split_matrix_shape(self.value(*a).shape())?;
                let n = *self.value(*b).shape().last().unwrap();
                let batch: usize = lead.iter().product();
                if self.needs(*a) {
                    // dA[i,p] = sum_j dC[i,j] * B[p,j]: mm_nt with B read as
                    // k rows of length n
                    let mut da = vec![0.0; batch * m * k];
                    let bv = self.value(*b).data();
                    for t in 0..batch {
                        mm_nt(
                            &grad.data()[t * m * n..(t + 1) * m * n],
                            &bv[t * k * n..(t + 1) * k * n],
                            &mut da[t * m * k..(t + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    let da = Array::new(self.value(*a).shape().to_vec(), da, grad.precision())?;
                    self.accum(*a, da);
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; batch * k * n];
                    let av = self.value(*a).data();
                    for t in 0..batch {
                        mm_tn(
                            &av[t * m * k..(t + 1) * m * k],
                            &grad.data()[t * m * n..(t + 1) * m * n],
                            &mut db[t * k * n..(t + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                    let db = Array::new(self.value(*b).shape().to_vec(), db, grad.precision())?;
                    self.accum(*b, db);
                }
            }
            Op::MatmulNT { a, b } => {
                // C = A @ B^T with A (.., m, k), B (.., n, k)
                // dA = dC @ B ; dB = dC^T @ A
                let (lead, m, k) = split_matrix_shape(self.value(*a).shape())?;
                let (lead_b, n, _) = split_matrix_shape(self.value(*b).shape())?;
                let broadcast = lead_b.is_empty() && !lead.is_empty();
                let batch: usize = lead.iter().product();
                if self.needs(*a) {
                    let mut da = vec![0.0; batch * m * k];
                    let bv = self.value(*b).data();
                    for t in 0..batch {
                        let bsl = if broadcast { bv } else { &bv[t * n * k..(t + 1) * n * k] };
                        mm_nn(
                            &grad.data()[t * m * n..(t + 1) * m * n],
                            bsl,
                            &mut da[t * m * k..(t + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    let da = Array::new(self.value(*a).shape().to_vec(), da, grad.precision())?;
                    self.accum(*a, da);
                }
                if self.needs(*b) {
                    let blen = self.value(*b).numel();
                    let mut db = vec![0.0; blen];
                    let av = self.value(*a).data();
                    for t in 0..batch {
                        let dsl = if broadcast {
                            &mut db[..]
                        } else {
                            &mut db[t * n * k..(t + 1) * n * k]
                        };
                        mm_tn(
                            &grad.data()[t * m * n..(t + 1) * m * n],
                            &av[t * m * k..(t + 1) * m * k],
                            dsl,
                            m,
                            n,
                            k,
                        );
                    }
                    let db = Array::new(self.value(*b).shape().to_vec(), db, grad.precision())?;
                    self.accum(*b, db);
                }
            }
            Op::Add { a, b } => {
                self.accum(*a, grad.clone());
                self.accum(*b, grad.clone());
            }
            Op::AddBias { a, bias } => {
                self.accum(*a, grad.clone());
                if self.needs(*bias) {
                    let d = self.value(*bias).numel();
                    let mut db = vec![0.0; d];
                    for (i, g) in grad.data().iter().enumerate() {
                        db[i % d] += g;
                    }
                    self.accum(*bias, Array::new(vec![d], db, grad.precision())?);
                }
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    let data: Vec<f64> = grad
                        .data()
                        .iter()
                        .zip(self.value(*b).data())
                        .map(|(g, y)| g * y)
                        .collect();
                    let da = Array::new(grad.shape().to_vec(), data, grad.precision())?;
                    self.accum(*a, da);
                }
                if self.needs(*b) {
                    let data: Vec<f64> = grad
                        .data()
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(g, x)| g * x)
                        .collect();
                    let db = Array::new(grad.shape().to_vec(), data, grad.precision())?;
                    self.accum(*b, db);
                }
            }
            Op::Scale { a, c } => {
                let data: Vec<f64> = grad.data().iter().map(|g| g * c).collect();
                self.accum(*a, Array::new(grad.shape().to_vec(), data, grad.precision())?);
            }
            Op::Relu { a } => {
                let data: Vec<f64> = grad
                    .data()
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect();
                self.accum(*a, Array::new(grad.shape().to_vec(), data, grad.precision())?);
            }
            Op::Softmax { a } => {
                let d = *self.value(out).shape().last().unwrap();
                let s = self.value(out).data();
                let mut data = vec![0.0; s.len()];
                for (row, chunk) in s.chunks(d).enumerate() {
                    let g = &grad.data()[row * d..(row + 1) * d];
                    let dot: f64 = g.iter().zip(chunk).map(|(gi, si)| gi * si).sum();
                    for j in 0..d {
                        data[row * d + j] = (g[j] - dot) * chunk[j];
                    }
                }
                self.accum(*a, Array::new(grad.shape().to_vec(), data, grad.precision())?);
            }
            Op::LayerNorm { a, gamma, beta } => {
                let d = *self.value(*a).shape().last().unwrap();
                let x = self.value(*a).data();
                let gv = self.value(*gamma).data().to_vec();
                let rows = x.len() / d;
                let mut dx = vec![0.0; x.len()];
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for r in 0..rows {
                    let xr = &x[r * d..(r + 1) * d];
                    let gr = &grad.data()[r * d..(r + 1) * d];
                    let mean = xr.iter().sum::<f64>() / d as f64;
                    let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    // xhat_j = (x_j - mean) * inv
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for j in 0..d {
                        let xhat = (xr[j] - mean) * inv;
                        let dxhat = gr[j] * gv[j];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                        dgamma[j] += gr[j] * xhat;
                        dbeta[j] += gr[j];
                    }
                    for j in 0..d {
                        let xhat = (xr[j] - mean) * inv;
                        let dxhat = gr[j] * gv[j];
                        dx[r * d + j] = inv
                            * (dxhat - sum_dxhat / d as f64 - xhat * sum_dxhat_xhat / d as f64);
                    }
                }
                if self.needs(*a) {
                    self.accum(*a, Array::new(self.value(*a).shape().to_vec(), dx, grad.precision())?);
                }
                if self.needs(*gamma) {
                    self.accum(*gamma, Array::new(vec![d], dgamma, grad.precision())?);
                }
                if self.needs(*beta) {
                    self.accum(*beta, Array::new(vec![d], dbeta, grad.precision())?);
                }
            }
            Op::Embed { table, ids, .. } => {
                if self.needs(*table) {
                    let tshape = self.value(*table).shape().to_vec();
                    let d = tshape[1];
                    let mut dt = vec![0.0; self.value(*table).numel()];
                    for (i, &id) in ids.iter().enumerate() {
                        let g = &grad.data()[i * d..(i + 1) * d];
                        let row = &mut dt[id * d..(id + 1) * d];
                        for j in 0..d {
                            row[j] += g[j];
                        }
                    }
                    self.accum(*table, Array::new(tshape, dt, grad.precision())?);
                }
            }
            Op::Reshape { a } => {
                let da = grad.reshaped(self.value(*a).shape().to_vec())?;
                self.accum(*a, da);
            }
            Op::Permute { a, perm } => {
                let inv = invert_perm(perm);
                let data = permute_data(grad.data(), grad.shape(), &inv);
                self.accum(
                    *a,
                    Array::new(self.value(*a).shape().to_vec(), data, grad.precision())?,
                );
            }
            Op::SelectPos { a, pos } => {
                if self.needs(*a) {
                    let s = self.value(*a).shape().to_vec();
                    let (b, t, d) = (s[0], s[1], s[2]);
                    let mut da = vec![0.0; b * t * d];
                    for bi in 0..b {
                        let g = &grad.data()[bi * d..(bi + 1) * d];
                        let base = (bi * t + pos) * d;
                        da[base..base + d].copy_from_slice(g);
                    }
                    self.accum(*a, Array::new(s, da, grad.precision())?);
                }
            }
            Op::GatherCols { a, cols } => {
                if self.needs(*a) {
                    let s = self.value(*a).shape().to_vec();
                    let (b, c) = (s[0], s[1]);
                    let mut da = vec![0.0; b * c];
                    for bi in 0..b {
                        for (j, &col) in cols.iter().enumerate() {
                            da[bi * c + col] += grad.data()[bi * cols.len() + j];
                        }
                    }
                    self.accum(*a, Array::new(s, da, grad.precision())?);
                }
            }
            Op::CausalMask { a } => {
                // additive constant: gradient passes through unchanged
                self.accum(*a, grad.clone());
            }
            Op::CrossEntropy { logits, targets } => {
                if self.needs(*logits) {
                    let s = self.value(*logits).shape().to_vec();
                    let (n, c) = (s[0], s[1]);
                    let counted = targets.iter().filter(|&&t| t >= 0).count() as f64;
                    let upstream = grad.scalar() / counted;
                    let lv = self.value(*logits).data();
                    let mut dl = vec![0.0; n * c];
                    for (i, &t) in targets.iter().enumerate() {
                        if t < 0 {
                            continue;
                        }
                        let row = &lv[i * c..(i + 1) * c];
                        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
                        for j in 0..c {
                            let p = (row[j] - m).exp() / z;
                            let onehot = if j == t as usize { 1.0 } else { 0.0 };
                            dl[i * c + j] = (p - onehot) * upstream;
                        }
                    }
                    self.accum(*logits, Array::new(s, dl, grad.precision())?);
                }
            }
            Op::SumAll { a } => {
                let g = grad.scalar();
                let da = Array::full(self.value(*a).shape(), g);
                self.accum(*a, da);
            }
            Op::ScatterRowsAdd { base, u, rows } => {
                self.accum(*base, grad.clone());
                if self.needs(*u) {
                    let us = self.value(*u).shape().to_vec();
                    let c = us[1];
                    let mut du = vec![0.0; self.value(*u).numel()];
                    // adjoint of the scatter: group gradient is the sum of
                    // its member-row gradients
                    for &(row, group) in rows {
                        let g = &grad.data()[row * c..(row + 1) * c];
                        let dst = &mut du[group * c..(group + 1) * c];
                        for j in 0..c {
                            dst[j] += g[j];
                        }
                    }
                    self.accum(*u, Array::new(us, du, grad.precision())?);
                }
            }
        }
        Ok(())
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Matmul { .. } => "matmul",
        Op::MatmulNT { .. } => "matmul_nt",
        Op::Add { .. } => "add",
        Op::AddBias { .. } => "add_bias",
        Op::Mul { .. } => "mul",
        Op::Scale { .. } => "scale",
        Op::Relu { .. } => "relu",
        Op::Softmax { .. } => "softmax",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Embed { .. } => "embed",
        Op::Reshape { .. } => "reshape",
        Op::Permute { .. } => "permute",
        Op::SelectPos { .. } => "select_pos",
        Op::GatherCols { .. } => "gather_cols",
        Op::CausalMask { .. } => "causal_mask",
        Op::CrossEntropy { .. } => "cross_entropy",
        Op::SumAll { .. } => "sum_all",
        Op::ScatterRowsAdd { .. } => "scatter_rows_add",
    }
}

fn split_matrix_shape(shape: &[usize]) -> Result<(Vec<usize>, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::Shape(format!("matrix op on shape {shape:?}")));
    }
    let (lead, mk) = shape.split_at(shape.len() - 2);
    Ok((lead.to_vec(), mk[0], mk[1]))
}

fn invert_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

fn permute_data(data: &[f64], in_shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let ndim = in_shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let mut in_strides = vec![1usize; ndim];
    for d in (0..ndim.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * in_shape[d + 1];
    }
    let numel = data.len();
    let mut out = vec![0.0; numel];
    let mut coords = vec![0usize; ndim];
    for (oi, slot) in out.iter_mut().enumerate() {
        let mut rem = oi;
        for d in (0..ndim).rev() {
            coords[d] = rem % out_shape[d];
            rem /= out_shape[d];
        }
        let mut ii = 0;
        for d in 0..ndim {
            ii += coords[d] * in_strides[perm[d]];
        }
        *slot = data[ii];
    }
    out
}
