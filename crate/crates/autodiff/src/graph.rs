//! Tape-recorded computation graph.
//!
//! Ops are appended in execution order, so the node list is already a
//! topological order and backward is a single reverse sweep. A node requires
//! a gradient iff one of its inputs does; frozen parameters and constants
//! therefore cost nothing on the backward pass beyond what is needed to
//! reach trainable leaves.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use rand::Rng;

use crate::error::{AutodiffError, Result};
use crate::param::Parameter;
use crate::tensor::{gemm, Tensor};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    Row,
    Scalar,
}

/// Multi-head scaled dot-product attention over independent blocks.
///
/// Inputs are `[blocks * block_len, width]`; each consecutive run of
/// `block_len` rows is one sequence. `key_mask[j] == false` removes key row
/// `j` from every softmax it would take part in.
#[derive(Clone, Debug)]
pub struct AttentionSpec {
    pub n_heads: usize,
    pub block_len: usize,
    pub causal: bool,
    pub key_mask: Option<Vec<bool>>,
}

#[derive(Debug)]
enum Op {
    Constant,
    Param,
    MatMul(Var, Var),
    Add(Var, Var, Broadcast),
    Mul(Var, Var, Broadcast),
    Affine(Var, f64),
    Sigmoid(Var),
    LogSigmoid(Var),
    Log(Var),
    Relu(Var),
    Gelu(Var),
    ConcatCols(Var, Var),
    GatherRows(Var, Vec<Option<usize>>),
    BlockMean(Var, usize),
    RowSum(Var),
    Sum(Var),
    Mean(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        spec: AttentionSpec,
        probs: Arc<Tensor>,
    },
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param => "param",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Affine(..) => "affine",
            Op::Sigmoid(..) => "sigmoid",
            Op::LogSigmoid(..) => "log_sigmoid",
            Op::Log(..) => "log",
            Op::Relu(..) => "relu",
            Op::Gelu(..) => "gelu",
            Op::ConcatCols(..) => "concat",
            Op::GatherRows(..) => "gather_rows",
            Op::BlockMean(..) => "block_mean",
            Op::RowSum(..) => "row_sum",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Attention { .. } => "attention",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    grads: Vec<Option<Tensor>>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log σ(x) = −softplus(−x)`, finite for every finite `x`.
fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shared_value(&self, v: Var) -> Arc<Tensor> {
        Arc::clone(&self.nodes[v.0].value)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Number of recorded nodes per op kind.
    pub fn op_histogram(&self) -> BTreeMap<&'static str, usize> {
        let mut out = BTreeMap::new();
        for n in &self.nodes {
            *out.entry(n.op.kind()).or_insert(0) += 1;
        }
        out
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.push_shared(Arc::new(value), op, requires_grad)
    }

    fn push_shared(&mut self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, false)
    }

    pub fn constant_shared(&mut self, t: Arc<Tensor>) -> Var {
        self.push_shared(t, Op::Constant, false)
    }

    /// Records `p` as a leaf. Repeated calls with the same parameter name
    /// return the same node so gradients from every use accumulate.
    pub fn param(&mut self, p: &Parameter) -> Var {
        if let Some(&v) = self.params.get(p.name()) {
            return v;
        }
        let v = self.push_shared(p.shared_value(), Op::Param, p.requires_grad());
        self.params.insert(p.name().to_string(), v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(AutodiffError::Dimension {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, false);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    fn broadcast_kind(&self, op: &'static str, a: Var, b: Var) -> Result<Broadcast> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            Ok(Broadcast::Same)
        } else if tb.len() == 1 {
            Ok(Broadcast::Scalar)
        } else if tb.len() == ta.cols() && tb.cols() == ta.cols() {
            Ok(Broadcast::Row)
        } else {
            Err(AutodiffError::Dimension {
                op,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            })
        }
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Tensor, Broadcast)> {
        let bc = self.broadcast_kind(op, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let cols = ta.cols();
        let bd = tb.data();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = match bc {
                    Broadcast::Same => bd[i],
                    Broadcast::Row => bd[i % cols],
                    Broadcast::Scalar => bd[0],
                };
                f(x, y)
            })
            .collect();
        Ok((Tensor::new(ta.shape().to_vec(), data)?, bc))
    }

    /// Elementwise `a + b`; `b` may be a row vector or a scalar broadcast over `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, bc) = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b, bc), rg))
    }

    /// Hadamard product with the same broadcasting rules as [`Graph::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, bc) = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b, bc), rg))
    }

    /// `scale * a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let t = self.value(a).map(|x| scale * x + shift);
        let rg = self.rg(&[a]);
        self.push(t, Op::Affine(a, scale), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.affine(a, c, 0.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(sigmoid);
        let rg = self.rg(&[a]);
        self.push(t, Op::Sigmoid(a), rg)
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(log_sigmoid);
        let rg = self.rg(&[a]);
        self.push(t, Op::LogSigmoid(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some((index, &value)) = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .find(|(_, &x)| x <= 0.0 || x.is_nan())
        {
            return Err(AutodiffError::Domain { value, index });
        }
        let t = self.value(a).map(f64::ln);
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Log(a), rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(&[a]);
        self.push(t, Op::Relu(a), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(gelu);
        let rg = self.rg(&[a]);
        self.push(t, Op::Gelu(a), rg)
    }

    /// Concatenates along the last axis; both inputs must have equal row counts.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rows() != tb.rows() {
            return Err(AutodiffError::Dimension {
                op: "concat",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (ca, cb) = (ta.cols(), tb.cols());
        let rows = ta.rows();
        let mut data = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            data.extend_from_slice(ta.row(r));
            data.extend_from_slice(tb.row(r));
        }
        let mut shape = ta.shape().to_vec();
        if shape.is_empty() {
            shape.push(ca + cb);
        } else {
            *shape.last_mut().unwrap() = ca + cb;
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, data)?, Op::ConcatCols(a, b), rg))
    }

    /// Selects rows of `src`; `None` produces a zero row.
    pub fn gather_rows(&mut self, src: Var, idx: &[Option<usize>]) -> Result<Var> {
        let t = self.value(src);
        let (rows, cols) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(idx.len() * cols);
        for i in idx {
            match *i {
                Some(r) if r < rows => data.extend_from_slice(t.row(r)),
                Some(r) => {
                    return Err(AutodiffError::Invalid {
                        op: "gather_rows",
                        msg: format!("row {r} out of range for {rows} rows"),
                    })
                }
                None => data.extend(std::iter::repeat_n(0.0, cols)),
            }
        }
        let rg = self.rg(&[src]);
        let out = Tensor::new(vec![idx.len(), cols], data)?;
        Ok(self.push(out, Op::GatherRows(src, idx.to_vec()), rg))
    }

    /// Mean over each run of `block` consecutive rows: `[n*block, c] -> [n, c]`.
    pub fn block_mean(&mut self, a: Var, block: usize) -> Result<Var> {
        let t = self.value(a);
        if block == 0 || !t.rows().is_multiple_of(block) {
            return Err(AutodiffError::Invalid {
                op: "block_mean",
                msg: format!("{} rows not divisible into blocks of {block}", t.rows()),
            });
        }
        let (cols, n) = (t.cols(), t.rows() / block);
        let mut data = vec![0.0; n * cols];
        for b in 0..n {
            let out = &mut data[b * cols..(b + 1) * cols];
            for r in 0..block {
                for (o, x) in out.iter_mut().zip(t.row(b * block + r)) {
                    *o += x;
                }
            }
            for o in out.iter_mut() {
                *o /= block as f64;
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::new(vec![n, cols], data)?,
            Op::BlockMean(a, block),
            rg,
        ))
    }

    /// Sum over the last axis: `[r, c] -> [r, 1]`.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data: Vec<f64> = (0..t.rows()).map(|r| t.row(r).iter().sum()).collect();
        let n = data.len();
        let rg = self.rg(&[a]);
        self.push(
            Tensor::new(vec![n, 1], data).expect("row_sum shape"),
            Op::RowSum(a),
            rg,
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.sum() / t.len() as f64;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Row-wise normalization to zero mean and unit variance, then `gamma`/`beta` affine.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let cols = t.cols();
        for (name, p) in [("gamma", gamma), ("beta", beta)] {
            if self.value(p).len() != cols {
                return Err(AutodiffError::Invalid {
                    op: "layer_norm",
                    msg: format!(
                        "{name} has {} entries, rows have {cols}",
                        self.value(p).len()
                    ),
                });
            }
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = t.rows();
        let mut xhat = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = t.row(r);
            let mu = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..cols {
                let h = (row[c] - mu) * is;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + b[c];
            }
        }
        let out = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Returns the attended output and the `[blocks, heads, L, L]` weights.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        spec: AttentionSpec,
    ) -> Result<(Var, Arc<Tensor>)> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        if tq.shape() != tk.shape() || tq.shape() != tv.shape() || tq.shape().len() != 2 {
            return Err(AutodiffError::Dimension {
                op: "attention",
                lhs: tq.shape().to_vec(),
                rhs: tk.shape().to_vec(),
            });
        }
        let (rows, width) = (tq.rows(), tq.cols());
        let (h, l) = (spec.n_heads, spec.block_len);
        if h == 0 || width % h != 0 || l == 0 || rows % l != 0 {
            return Err(AutodiffError::Invalid {
                op: "attention",
                msg: format!("width {width}, heads {h}, rows {rows}, block {l}"),
            });
        }
        if let Some(m) = &spec.key_mask {
            if m.len() != rows {
                return Err(AutodiffError::Invalid {
                    op: "attention",
                    msg: format!("key mask has {} entries for {rows} rows", m.len()),
                });
            }
        }
        let dh = width / h;
        let scale = 1.0 / (dh as f64).sqrt();
        let blocks = rows / l;
        let mut probs = vec![0.0; blocks * h * l * l];
        let mut out = vec![0.0; rows * width];
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        let mut logits = vec![0.0; l];
        for b in 0..blocks {
            for head in 0..h {
                let off = head * dh;
                for i in 0..l {
                    let qi = (b * l + i) * width + off;
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..l {
                        if !key_visible(&spec, b, i, j) {
                            continue;
                        }
                        let kj = (b * l + j) * width + off;
                        let mut s = 0.0;
                        for d in 0..dh {
                            s += qd[qi + d] * kd[kj + d];
                        }
                        logits[j] = s * scale;
                        max = max.max(logits[j]);
                    }
                    if max == f64::NEG_INFINITY {
                        continue;
                    }
                    let prow = &mut probs[((b * h + head) * l + i) * l..][..l];
                    let mut z = 0.0;
                    for j in 0..l {
                        if key_visible(&spec, b, i, j) {
                            prow[j] = (logits[j] - max).exp();
                            z += prow[j];
                        }
                    }
                    for p in prow.iter_mut() {
                        *p /= z;
                    }
                    let orow = &mut out[qi..qi + dh];
                    for j in 0..l {
                        if prow[j] == 0.0 {
                            continue;
                        }
                        let vj = (b * l + j) * width + off;
                        for d in 0..dh {
                            orow[d] += prow[j] * vd[vj + d];
                        }
                    }
                }
            }
        }
        let probs = Arc::new(Tensor::new(vec![blocks, h, l, l], probs)?);
        let out = Tensor::new(vec![rows, width], out)?;
        let rg = self.rg(&[q, k, v]);
        let var = self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                spec,
                probs: Arc::clone(&probs),
            },
            rg,
        );
        Ok((var, probs))
    }

    /// Inverted dropout with an explicit keep-mask (1 = keep).
    pub fn dropout_with_mask(&mut self, x: Var, mask: &Tensor, rate: f64) -> Result<Var> {
        if rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let m = self.constant(mask.map(|k| k * keep));
        self.mul(x, m)
    }

    /// Draws a keep-mask from `rng` and applies [`Graph::dropout_with_mask`].
    /// Identity (and no draws) when `rate == 0`.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut (impl Rng + ?Sized)) -> Result<Var> {
        if rate <= 0.0 {
            return Ok(x);
        }
        let mask = dropout_mask(self.value(x).shape(), rate, rng);
        self.dropout_with_mask(x, &mask, rate)
    }

    /// Reverse sweep from a scalar `loss`. Overwrites gradients of any
    /// previous backward call on this graph.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(AutodiffError::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lt.shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients of every trainable parameter reached by the last backward.
    pub fn param_grads(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().filter_map(|(name, v)| {
            if !self.nodes[v.0].requires_grad {
                return None;
            }
            self.grad(*v).map(|g| (name.as_str(), g))
        })
    }

    /// Adds this graph's gradient for `p` (if any) into `p`'s buffer.
    pub fn accumulate_into(&self, p: &mut Parameter) {
        if let Some(v) = self.params.get(p.name()) {
            if let Some(g) = self.grad(*v) {
                p.accumulate_grad(g);
            }
        }
    }

    fn backprop_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        let acc = |grads: &mut [Option<Tensor>], v: Var, t: Tensor| match &mut grads[v.0] {
            Some(buf) => buf.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        let need = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Constant | Op::Param => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if need(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, tb.data(), true, &mut ga, false);
                    acc(grads, *a, Tensor::new(vec![m, k], ga).unwrap());
                }
                if need(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, ta.data(), true, g.data(), false, &mut gb, false);
                    acc(grads, *b, Tensor::new(vec![k, n], gb).unwrap());
                }
            }
            Op::Add(a, b, bc) => {
                if need(*a) {
                    acc(grads, *a, g.clone());
                }
                if need(*b) {
                    let gb = reduce_broadcast(g, self.value(*b), *bc, |gi, _| gi);
                    acc(grads, *b, gb);
                }
            }
            Op::Mul(a, b, bc) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let cols = ta.cols();
                if need(*a) {
                    let bd = tb.data();
                    let data = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, gi)| {
                            gi * match bc {
                                Broadcast::Same => bd[i],
                                Broadcast::Row => bd[i % cols],
                                Broadcast::Scalar => bd[0],
                            }
                        })
                        .collect();
                    acc(grads, *a, Tensor::new(ta.shape().to_vec(), data).unwrap());
                }
                if need(*b) {
                    let ad = ta.data();
                    let gb = reduce_broadcast(g, tb, *bc, |gi, i| gi * ad[i]);
                    acc(grads, *b, gb);
                }
            }
            Op::Affine(a, s) => {
                acc(grads, *a, g.map(|x| x * s));
            }
            Op::Sigmoid(a) => {
                let data = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(gi, s)| gi * s * (1.0 - s));
                acc(grads, *a, with_shape(out, data.collect()));
            }
            Op::LogSigmoid(a) => {
                let x = self.value(*a).data();
                let data = g.data().iter().zip(x).map(|(gi, &xi)| gi * sigmoid(-xi));
                acc(grads, *a, with_shape(out, data.collect()));
            }
            Op::Log(a) => {
                let x = self.value(*a).data();
                let data = g.data().iter().zip(x).map(|(gi, xi)| gi / xi);
                acc(grads, *a, with_shape(out, data.collect()));
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let data = g
                    .data()
                    .iter()
                    .zip(x)
                    .map(|(gi, &xi)| if xi > 0.0 { *gi } else { 0.0 });
                acc(grads, *a, with_shape(out, data.collect()));
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                let data = g.data().iter().zip(x).map(|(gi, &xi)| gi * gelu_grad(xi));
                acc(grads, *a, with_shape(out, data.collect()));
            }
            Op::ConcatCols(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (ca, cb) = (ta.cols(), tb.cols());
                let rows = ta.rows();
                if need(*a) {
                    let mut d = Vec::with_capacity(rows * ca);
                    for r in 0..rows {
                        d.extend_from_slice(&g.row(r)[..ca]);
                    }
                    acc(grads, *a, with_shape(ta, d));
                }
                if need(*b) {
                    let mut d = Vec::with_capacity(rows * cb);
                    for r in 0..rows {
                        d.extend_from_slice(&g.row(r)[ca..]);
                    }
                    acc(grads, *b, with_shape(tb, d));
                }
            }
            Op::GatherRows(src, idx) => {
                let ts = self.value(*src);
                let cols = ts.cols();
                let mut d = vec![0.0; ts.len()];
                for (o, i) in idx.iter().enumerate() {
                    if let Some(r) = *i {
                        for (dst, x) in d[r * cols..(r + 1) * cols].iter_mut().zip(g.row(o)) {
                            *dst += x;
                        }
                    }
                }
                acc(grads, *src, with_shape(ts, d));
            }
            Op::BlockMean(a, block) => {
                let ta = self.value(*a);
                let cols = ta.cols();
                let mut d = vec![0.0; ta.len()];
                for r in 0..ta.rows() {
                    let src = g.row(r / block);
                    for (dst, x) in d[r * cols..(r + 1) * cols].iter_mut().zip(src) {
                        *dst = x / *block as f64;
                    }
                }
                acc(grads, *a, with_shape(ta, d));
            }
            Op::RowSum(a) => {
                let ta = self.value(*a);
                let cols = ta.cols();
                let d = (0..ta.len()).map(|i| g.data()[i / cols]).collect();
                acc(grads, *a, with_shape(ta, d));
            }
            Op::Sum(a) => {
                let ta = self.value(*a);
                acc(grads, *a, Tensor::full(ta.shape(), g.item()));
            }
            Op::Mean(a) => {
                let ta = self.value(*a);
                acc(
                    grads,
                    *a,
                    Tensor::full(ta.shape(), g.item() / ta.len() as f64),
                );
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let tx = self.value(*x);
                let cols = tx.cols();
                let rows = tx.rows();
                let gam = self.value(*gamma).data();
                if need(*x) {
                    let mut d = vec![0.0; tx.len()];
                    for r in 0..rows {
                        let gr = g.row(r);
                        let xh = &xhat[r * cols..(r + 1) * cols];
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for c in 0..cols {
                            let dxh = gr[c] * gam[c];
                            mean_d += dxh;
                            mean_dx += dxh * xh[c];
                        }
                        mean_d /= cols as f64;
                        mean_dx /= cols as f64;
                        for c in 0..cols {
                            let dxh = gr[c] * gam[c];
                            d[r * cols + c] = inv_std[r] * (dxh - mean_d - xh[c] * mean_dx);
                        }
                    }
                    acc(grads, *x, with_shape(tx, d));
                }
                if need(*gamma) {
                    let mut d = vec![0.0; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            d[c] += g.row(r)[c] * xhat[r * cols + c];
                        }
                    }
                    acc(grads, *gamma, with_shape(self.value(*gamma), d));
                }
                if need(*beta) {
                    let mut d = vec![0.0; cols];
                    for r in 0..rows {
                        for (dc, gc) in d.iter_mut().zip(g.row(r)) {
                            *dc += gc;
                        }
                    }
                    acc(grads, *beta, with_shape(self.value(*beta), d));
                }
            }
            Op::Attention {
                q,
                k,
                v,
                spec,
                probs,
            } => {
                let (gq, gk, gv) = attention_backward(
                    self.value(*q),
                    self.value(*k),
                    self.value(*v),
                    spec,
                    probs,
                    g,
                );
                if need(*q) {
                    acc(grads, *q, gq);
                }
                if need(*k) {
                    acc(grads, *k, gk);
                }
                if need(*v) {
                    acc(grads, *v, gv);
                }
            }
        }
    }
}

fn key_visible(spec: &AttentionSpec, block: usize, i: usize, j: usize) -> bool {
    if spec.causal && j > i {
        return false;
    }
    spec.key_mask
        .as_ref()
        .is_none_or(|m| m[block * spec.block_len + j])
}

fn with_shape(like: &Tensor, data: Vec<f64>) -> Tensor {
    Tensor::new(like.shape().to_vec(), data).expect("gradient shape")
}

fn reduce_broadcast(
    g: &Tensor,
    target: &Tensor,
    bc: Broadcast,
    f: impl Fn(f64, usize) -> f64,
) -> Tensor {
    match bc {
        Broadcast::Same => with_shape(
            target,
            g.data().iter().enumerate().map(|(i, &x)| f(x, i)).collect(),
        ),
        Broadcast::Row => {
            let cols = target.len();
            let mut d = vec![0.0; cols];
            for (i, &x) in g.data().iter().enumerate() {
                d[i % cols] += f(x, i);
            }
            with_shape(target, d)
        }
        Broadcast::Scalar => {
            let s = g.data().iter().enumerate().map(|(i, &x)| f(x, i)).sum();
            with_shape(target, vec![s])
        }
    }
}

fn attention_backward(
    tq: &Tensor,
    tk: &Tensor,
    tv: &Tensor,
    spec: &AttentionSpec,
    probs: &Tensor,
    g: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (rows, width) = (tq.rows(), tq.cols());
    let (h, l) = (spec.n_heads, spec.block_len);
    let dh = width / h;
    let scale = 1.0 / (dh as f64).sqrt();
    let blocks = rows / l;
    let (qd, kd, vd, gd, pd) = (tq.data(), tk.data(), tv.data(), g.data(), probs.data());
    let mut dq = vec![0.0; rows * width];
    let mut dk = vec![0.0; rows * width];
    let mut dv = vec![0.0; rows * width];
    let mut dp = vec![0.0; l];
    for b in 0..blocks {
        for head in 0..h {
            let off = head * dh;
            for i in 0..l {
                let prow = &pd[((b * h + head) * l + i) * l..][..l];
                let oi = (b * l + i) * width + off;
                let mut dot = 0.0;
                for j in 0..l {
                    dp[j] = 0.0;
                    if prow[j] == 0.0 {
                        continue;
                    }
                    let vj = (b * l + j) * width + off;
                    let mut s = 0.0;
                    for d in 0..dh {
                        s += gd[oi + d] * vd[vj + d];
                        dv[vj + d] += prow[j] * gd[oi + d];
                    }
                    dp[j] = s;
                    dot += s * prow[j];
                }
                for j in 0..l {
                    if prow[j] == 0.0 {
                        continue;
                    }
                    let ds = prow[j] * (dp[j] - dot) * scale;
                    let kj = (b * l + j) * width + off;
                    for d in 0..dh {
                        dq[oi + d] += ds * kd[kj + d];
                        dk[kj + d] += ds * qd[oi + d];
                    }
                }
            }
        }
    }
    (with_shape(tq, dq), with_shape(tk, dk), with_shape(tv, dv))
}

/// Bernoulli keep-mask with keep probability `1 - rate`.
pub fn dropout_mask(shape: &[usize], rate: f64, rng: &mut (impl Rng + ?Sized)) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { 1.0 })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("mask shape")
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    sigmoid(x)
}

pub fn log_sigmoid_scalar(x: f64) -> f64 {
    log_sigmoid(x)
}
