//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Ops are recorded on a [`Graph`]; node ids are handed out in construction
//! order, so reverse id order is a reverse topological order and [`Graph::backward`]
//! walks it exactly once. There is no broadcasting beyond scalar [`Graph::scale`];
//! shape mismatches are hard errors naming both shapes.

use crate::error::{Error, Result};
use rand::Rng;

/// A dense row-major f64 tensor. Used both as a standalone value (model
/// parameters, saved artifacts) and as the payload of graph nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(data: Vec<f64>, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::Internal(format!(
                "tensor data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: true,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            requires_grad: true,
            grad: None,
        }
    }

    /// Uniform init in [-bound, bound].
    pub fn uniform<R: Rng>(shape: Vec<usize>, bound: f64, rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.gen_range(-bound..bound)).collect();
        Tensor {
            shape,
            data,
            requires_grad: true,
            grad: None,
        }
    }

    /// Glorot-style init for a [fan_in, fan_out] matrix.
    pub fn glorot<R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Self::uniform(vec![fan_in, fan_out], bound, rng)
    }

    pub fn scalar(x: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![x],
            requires_grad: true,
            grad: None,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn frozen(mut self) -> Self {
        self.requires_grad = false;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: TensorId, b: TensorId },
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Relu { x: TensorId },
    Sigmoid { x: TensorId },
    Exp { x: TensorId },
    Log { x: TensorId },
    Scale { x: TensorId, c: f64 },
    Clamp { x: TensorId, lo: f64, hi: f64 },
    SoftmaxMasked { x: TensorId, mask: Vec<bool> },
    GatherRows { table: TensorId, indices: Vec<usize> },
    Concat { parts: Vec<TensorId> },
    ReduceSum { x: TensorId },
    Mean { x: TensorId },
    Transpose { x: TensorId },
    Reshape { x: TensorId },
    ExpandRows { x: TensorId, n: usize },
}

struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    op: Op,
    /// True when this node is a requires_grad leaf or depends on one.
    track: bool,
    grad: Option<Vec<f64>>,
}

/// Reverse-mode tape. Build one per forward/backward step; immutable tensors
/// are copied in as leaves and gradients are read back out after `backward`.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_ran: bool,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, op: Op, track: bool) -> TensorId {
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node {
            data,
            shape,
            op,
            track,
            grad: None,
        });
        id
    }

    fn node(&self, id: TensorId) -> &Node {
        &self.nodes[id.0]
    }

    fn tracked(&self, id: TensorId) -> bool {
        self.nodes[id.0].track
    }

    /// Insert a standalone tensor as a leaf, honoring its requires_grad flag.
    pub fn insert(&mut self, t: &Tensor) -> TensorId {
        self.push(t.data.clone(), t.shape.clone(), Op::Leaf, t.requires_grad)
    }

    pub fn leaf(&mut self, data: Vec<f64>, shape: Vec<usize>) -> Result<TensorId> {
        let t = Tensor::new(data, shape)?;
        Ok(self.insert(&t))
    }

    pub fn constant(&mut self, data: Vec<f64>, shape: Vec<usize>) -> Result<TensorId> {
        let t = Tensor::new(data, shape)?.frozen();
        Ok(self.insert(&t))
    }

    pub fn scalar_const(&mut self, x: f64) -> TensorId {
        self.push(vec![x], vec![1], Op::Leaf, false)
    }

    pub fn value(&self, id: TensorId) -> &[f64] {
        &self.node(id).data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.node(id).shape
    }

    pub fn scalar_value(&self, id: TensorId) -> f64 {
        self.node(id).data[0]
    }

    /// Gradient of the last backward root w.r.t. this node; None for nodes
    /// outside the tracked subgraph (e.g. frozen leaves).
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.node(id).grad.as_deref()
    }

    // ── ops ──────────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_raw(&self.node(a).data, &self.node(b).data, m, k, n);
        let track = self.tracked(a) || self.tracked(b);
        Ok(self.push(data, vec![m, n], Op::MatMul { a, b }, track))
    }

    fn binary_pointwise(
        &mut self,
        name: &'static str,
        a: TensorId,
        b: TensorId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb {
            return Err(Error::Dimension {
                op: name,
                lhs: sa,
                rhs: sb,
            });
        }
        let data = self
            .node(a)
            .data
            .iter()
            .zip(self.node(b).data.iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let track = self.tracked(a) || self.tracked(b);
        Ok(self.push(data, sa, op, track))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_pointwise("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_pointwise("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_pointwise("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    fn unary(&mut self, x: TensorId, f: impl Fn(f64) -> f64, op: Op) -> TensorId {
        let data = self.node(x).data.iter().map(|&v| f(v)).collect();
        let shape = self.node(x).shape.clone();
        let track = self.tracked(x);
        self.push(data, shape, op, track)
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        self.unary(x, |v| v.max(0.0), Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        self.unary(x, sigmoid, Op::Sigmoid { x })
    }

    pub fn exp(&mut self, x: TensorId) -> TensorId {
        self.unary(x, f64::exp, Op::Exp { x })
    }

    pub fn log(&mut self, x: TensorId) -> Result<TensorId> {
        if let Some(&bad) = self.node(x).data.iter().find(|&&v| v <= 0.0) {
            return Err(Error::NumericDomain(format!("log of non-positive value {bad}")));
        }
        Ok(self.unary(x, f64::ln, Op::Log { x }))
    }

    pub fn scale(&mut self, x: TensorId, c: f64) -> TensorId {
        self.unary(x, |v| v * c, Op::Scale { x, c })
    }

    pub fn clamp(&mut self, x: TensorId, lo: f64, hi: f64) -> TensorId {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp { x, lo, hi })
    }

    /// Numerically-stabilized softmax over the unmasked entries of a vector.
    /// Masked outputs are exactly zero and receive no gradient.
    pub fn softmax_masked(&mut self, x: TensorId, mask: &[bool]) -> Result<TensorId> {
        let n = self.node(x).data.len();
        if self.node(x).shape.len() != 1 || mask.len() != n {
            return Err(Error::Dimension {
                op: "softmax_masked",
                lhs: self.node(x).shape.clone(),
                rhs: vec![mask.len()],
            });
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::EmptyAttention);
        }
        let xs = &self.node(x).data;
        let max = xs
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(&v, _)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut data = vec![0.0; n];
        let mut denom = 0.0;
        for i in 0..n {
            if mask[i] {
                data[i] = (xs[i] - max).exp();
                denom += data[i];
            }
        }
        for v in data.iter_mut() {
            *v /= denom;
        }
        let track = self.tracked(x);
        Ok(self.push(
            data,
            vec![n],
            Op::SoftmaxMasked {
                x,
                mask: mask.to_vec(),
            },
            track,
        ))
    }

    /// Row lookup into a [rows, d] table; backward scatter-adds into the table.
    pub fn gather_rows(&mut self, table: TensorId, indices: &[usize]) -> Result<TensorId> {
        let shape = self.node(table).shape.clone();
        if shape.len() != 2 {
            return Err(Error::Dimension {
                op: "gather_rows",
                lhs: shape,
                rhs: vec![indices.len()],
            });
        }
        let (rows, d) = (shape[0], shape[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::IndexOutOfRange { index: bad, rows });
        }
        let src = &self.node(table).data;
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let track = self.tracked(table);
        Ok(self.push(
            data,
            vec![indices.len(), d],
            Op::GatherRows {
                table,
                indices: indices.to_vec(),
            },
            track,
        ))
    }

    /// Concatenate along axis 0. All parts must share trailing dimensions.
    pub fn concat(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::Internal("concat of zero tensors".into()));
        }
        let first = self.node(parts[0]).shape.clone();
        let mut rows = 0usize;
        for &p in parts {
            let s = self.node(p).shape.clone();
            if s.len() != first.len() || s[1..] != first[1..] {
                return Err(Error::Dimension {
                    op: "concat",
                    lhs: first,
                    rhs: s,
                });
            }
            rows += s[0];
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(&self.node(p).data);
        }
        let mut shape = first;
        shape[0] = rows;
        let track = parts.iter().any(|&p| self.tracked(p));
        Ok(self.push(
            data,
            shape,
            Op::Concat {
                parts: parts.to_vec(),
            },
            track,
        ))
    }

    pub fn reduce_sum(&mut self, x: TensorId) -> TensorId {
        let s: f64 = self.node(x).data.iter().sum();
        let track = self.tracked(x);
        self.push(vec![s], vec![1], Op::ReduceSum { x }, track)
    }

    pub fn mean(&mut self, x: TensorId) -> TensorId {
        let n = self.node(x).data.len() as f64;
        let s: f64 = self.node(x).data.iter().sum();
        let track = self.tracked(x);
        self.push(vec![s / n], vec![1], Op::Mean { x }, track)
    }

    pub fn transpose(&mut self, x: TensorId) -> Result<TensorId> {
        let shape = self.node(x).shape.clone();
        if shape.len() != 2 {
            return Err(Error::Dimension {
                op: "transpose",
                lhs: shape,
                rhs: vec![],
            });
        }
        let (r, c) = (shape[0], shape[1]);
        let src = &self.node(x).data;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let track = self.tracked(x);
        Ok(self.push(data, vec![c, r], Op::Transpose { x }, track))
    }

    pub fn reshape(&mut self, x: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != self.node(x).data.len() {
            return Err(Error::Dimension {
                op: "reshape",
                lhs: self.node(x).shape.clone(),
                rhs: shape,
            });
        }
        let data = self.node(x).data.clone();
        let track = self.tracked(x);
        Ok(self.push(data, shape, Op::Reshape { x }, track))
    }

    /// Repeat a 1-D vector as n identical rows; backward column-sums.
    /// Repeat a vector (shape [d] or [1, d]) as `n` identical rows.
    pub fn expand_rows(&mut self, x: TensorId, n: usize) -> Result<TensorId> {
        let shape = self.node(x).shape.clone();
        let d = match shape.as_slice() {
            [d] => *d,
            [1, d] => *d,
            _ => {
                return Err(Error::Dimension {
                    op: "expand_rows",
                    lhs: shape,
                    rhs: vec![n],
                })
            }
        };
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            data.extend_from_slice(&self.node(x).data);
        }
        let track = self.tracked(x);
        Ok(self.push(data, vec![n, d], Op::ExpandRows { x, n }, track))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse pass from a scalar root. A second call on the same graph is
    /// rejected; build a fresh graph per step.
    pub fn backward(&mut self, root: TensorId) -> Result<()> {
        if self.backward_ran {
            return Err(Error::BackwardAlreadyRan);
        }
        self.backward_ran = true;
        if self.node(root).data.len() != 1 {
            return Err(Error::Internal(format!(
                "backward root must be scalar, got shape {:?}",
                self.node(root).shape
            )));
        }
        if !self.tracked(root) {
            return Ok(()); // nothing reachable requires grad
        }
        for node in self.nodes.iter_mut().filter(|n| n.track) {
            node.grad = Some(vec![0.0; node.data.len()]);
        }
        self.nodes[root.0].grad = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            if !self.nodes[i].track {
                continue;
            }
            let grad = match &self.nodes[i].grad {
                Some(g) => g.clone(),
                None => continue,
            };
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::MatMul { a, b } => {
                    let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                    let n = self.nodes[b.0].shape[1];
                    if self.tracked(a) {
                        // dA = dC @ B^T
                        let b_data = &self.nodes[b.0].data;
                        let mut bt = vec![0.0; k * n];
                        for r in 0..k {
                            for c in 0..n {
                                bt[c * k + r] = b_data[r * n + c];
                            }
                        }
                        let da = matmul_raw(&grad, &bt, m, n, k);
                        self.accumulate(a, &da);
                    }
                    if self.tracked(b) {
                        // dB = A^T @ dC
                        let a_data = &self.nodes[a.0].data;
                        let mut at = vec![0.0; m * k];
                        for r in 0..m {
                            for c in 0..k {
                                at[c * m + r] = a_data[r * k + c];
                            }
                        }
                        let db = matmul_raw(&at, &grad, k, m, n);
                        self.accumulate(b, &db);
                    }
                }
                Op::Add { a, b } => {
                    self.accumulate(a, &grad);
                    self.accumulate(b, &grad);
                }
                Op::Sub { a, b } => {
                    self.accumulate(a, &grad);
                    let neg: Vec<f64> = grad.iter().map(|g| -g).collect();
                    self.accumulate(b, &neg);
                }
                Op::Mul { a, b } => {
                    if self.tracked(a) {
                        let da: Vec<f64> = grad
                            .iter()
                            .zip(self.nodes[b.0].data.iter())
                            .map(|(g, &v)| g * v)
                            .collect();
                        self.accumulate(a, &da);
                    }
                    if self.tracked(b) {
                        let db: Vec<f64> = grad
                            .iter()
                            .zip(self.nodes[a.0].data.iter())
                            .map(|(g, &v)| g * v)
                            .collect();
                        self.accumulate(b, &db);
                    }
                }
                Op::Relu { x } => {
                    let dx: Vec<f64> = grad
                        .iter()
                        .zip(self.nodes[x.0].data.iter())
                        .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                        .collect();
                    self.accumulate(x, &dx);
                }
                Op::Sigmoid { x } => {
                    let dx: Vec<f64> = grad
                        .iter()
                        .zip(self.nodes[i].data.iter())
                        .map(|(g, &s)| g * s * (1.0 - s))
                        .collect();
                    self.accumulate(x, &dx);
                }
                Op::Exp { x } => {
                    let dx: Vec<f64> = grad
                        .iter()
                        .zip(self.nodes[i].data.iter())
                        .map(|(g, &e)| g * e)
                        .collect();
                    self.accumulate(x, &dx);
                }
                Op::Log { x } => {
                    let dx: Vec<f64> = grad
                        .iter()
                        .zip(self.nodes[x.0].data.iter())
                        .map(|(g, &v)| g / v)
                        .collect();
                    self.accumulate(x, &dx);
                }
                Op::Scale { x, c } => {
                    let dx: Vec<f64> = grad.iter().map(|g| g * c).collect();
                    self.accumulate(x, &dx);
                }
                Op::Clamp { x, lo, hi } => {
                    let dx: Vec<f64> = grad
                        .iter()
                        .zip(self.nodes[x.0].data.iter())
                        .map(|(g, &v)| if v > lo && v < hi { *g } else { 0.0 })
                        .collect();
                    self.accumulate(x, &dx);
                }
                Op::SoftmaxMasked { x, mask } => {
                    let out = &self.nodes[i].data;
                    let dot: f64 = grad
                        .iter()
                        .zip(out.iter())
                        .zip(mask.iter())
                        .filter(|(_, &m)| m)
                        .map(|((g, s), _)| g * s)
                        .sum();
                    let dx: Vec<f64> = grad
                        .iter()
                        .zip(out.iter())
                        .zip(mask.iter())
                        .map(|((g, &s), &m)| if m { s * (g - dot) } else { 0.0 })
                        .collect();
                    self.accumulate(x, &dx);
                }
                Op::GatherRows { table, indices } => {
                    if self.tracked(table) {
                        let d = self.nodes[table.0].shape[1];
                        let mut dt = vec![0.0; self.nodes[table.0].data.len()];
                        for (pos, &row) in indices.iter().enumerate() {
                            for c in 0..d {
                                dt[row * d + c] += grad[pos * d + c];
                            }
                        }
                        self.accumulate(table, &dt);
                    }
                }
                Op::Concat { parts } => {
                    let mut offset = 0;
                    for &p in &parts {
                        let len = self.nodes[p.0].data.len();
                        if self.tracked(p) {
                            let slice = grad[offset..offset + len].to_vec();
                            self.accumulate(p, &slice);
                        }
                        offset += len;
                    }
                }
                Op::ReduceSum { x } => {
                    let dx = vec![grad[0]; self.nodes[x.0].data.len()];
                    self.accumulate(x, &dx);
                }
                Op::Mean { x } => {
                    let n = self.nodes[x.0].data.len();
                    let dx = vec![grad[0] / n as f64; n];
                    self.accumulate(x, &dx);
                }
                Op::Transpose { x } => {
                    let (r, c) = (self.nodes[i].shape[0], self.nodes[i].shape[1]);
                    let mut dx = vec![0.0; grad.len()];
                    for a in 0..r {
                        for b in 0..c {
                            dx[b * r + a] = grad[a * c + b];
                        }
                    }
                    self.accumulate(x, &dx);
                }
                Op::Reshape { x } => {
                    self.accumulate(x, &grad);
                }
                Op::ExpandRows { x, n } => {
                    let d = self.nodes[x.0].data.len();
                    let mut dx = vec![0.0; d];
                    for row in 0..n {
                        for c in 0..d {
                            dx[c] += grad[row * d + c];
                        }
                    }
                    self.accumulate(x, &dx);
                }
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, id: TensorId, delta: &[f64]) {
        if let Some(g) = self.nodes[id.0].grad.as_mut() {
            for (a, b) in g.iter_mut().zip(delta) {
                *a += b;
            }
        }
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += av * b[p * n + j];
            }
        }
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Mean binary cross-entropy from already-squashed probabilities. Clamps
/// probabilities to [1e-12, 1 - 1e-12] before taking logs so saturated
/// predictions stay finite. Returns a scalar node.
pub fn bce_from_probs(g: &mut Graph, probs: TensorId, labels: &[u8]) -> Result<TensorId> {
    let n = g.shape(probs).iter().product::<usize>();
    if n != labels.len() {
        return Err(Error::Dimension {
            op: "bce_from_probs",
            lhs: g.shape(probs).to_vec(),
            rhs: vec![labels.len()],
        });
    }
    if n == 0 {
        return Err(Error::Config("cross-entropy over an empty batch".into()));
    }
    let shape = g.shape(probs).to_vec();
    let p = g.clamp(probs, 1e-12, 1.0 - 1e-12);
    let y: Vec<f64> = labels.iter().map(|&l| f64::from(l)).collect();
    let y_pos = g.constant(y.clone(), shape.clone())?;
    let y_neg = g.constant(y.iter().map(|v| 1.0 - v).collect(), shape.clone())?;
    let ones = g.constant(vec![1.0; n], shape)?;
    let log_p = g.log(p)?;
    let one_minus_p = g.sub(ones, p)?;
    let log_q = g.log(one_minus_p)?;
    let pos_term = g.mul(y_pos, log_p)?;
    let neg_term = g.mul(y_neg, log_q)?;
    let sum = g.add(pos_term, neg_term)?;
    let mean = g.mean(sum);
    Ok(g.scale(mean, -1.0))
}
