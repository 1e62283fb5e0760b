//! Reverse-mode autodiff on a linear tape.
//!
//! Forward ops append nodes in topological order; `backward` walks the tape
//! in reverse and accumulates vector-Jacobian products. Named tap points
//! expose the gradient at chosen intermediate activations, which is what the
//! grad-norm diagnostics are built on.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Handle to a node on a tape. Only valid for the tape that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Fieldless primitive identifiers, used by the gradient-check suite to
/// enumerate and select primitives by name.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrimKind {
    Matmul,
    Transpose,
    Add,
    AddRow,
    Mul,
    Scale,
    ScaleBy,
    Concat,
    Slice,
    Embedding,
    Tanh,
    Sigmoid,
    Relu,
    Exp,
    Softmax,
    LayerNorm,
    Dropout,
    Sum,
    Mean,
    L2Norm,
    CrossEntropy,
    ReverseRows,
}

impl PrimKind {
    pub const ALL: [PrimKind; 22] = [
        PrimKind::Matmul,
        PrimKind::Transpose,
        PrimKind::Add,
        PrimKind::AddRow,
        PrimKind::Mul,
        PrimKind::Scale,
        PrimKind::ScaleBy,
        PrimKind::Concat,
        PrimKind::Slice,
        PrimKind::Embedding,
        PrimKind::Tanh,
        PrimKind::Sigmoid,
        PrimKind::Relu,
        PrimKind::Exp,
        PrimKind::Softmax,
        PrimKind::LayerNorm,
        PrimKind::Dropout,
        PrimKind::Sum,
        PrimKind::Mean,
        PrimKind::L2Norm,
        PrimKind::CrossEntropy,
        PrimKind::ReverseRows,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PrimKind::Matmul => "matmul",
            PrimKind::Transpose => "transpose",
            PrimKind::Add => "add",
            PrimKind::AddRow => "add_row",
            PrimKind::Mul => "multiply",
            PrimKind::Scale => "scale",
            PrimKind::ScaleBy => "scale_by",
            PrimKind::Concat => "concat",
            PrimKind::Slice => "slice",
            PrimKind::Embedding => "embedding",
            PrimKind::Tanh => "tanh",
            PrimKind::Sigmoid => "sigmoid",
            PrimKind::Relu => "relu",
            PrimKind::Exp => "exp",
            PrimKind::Softmax => "softmax",
            PrimKind::LayerNorm => "layer_norm",
            PrimKind::Dropout => "dropout",
            PrimKind::Sum => "sum",
            PrimKind::Mean => "mean",
            PrimKind::L2Norm => "l2_norm",
            PrimKind::CrossEntropy => "cross_entropy",
            PrimKind::ReverseRows => "reverse_rows",
        }
    }

    pub fn from_name(name: &str) -> Result<PrimKind> {
        PrimKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == name)
            .ok_or_else(|| Error::Invalid(format!("unknown primitive kind `{name}`")))
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul {
        a: NodeId,
        b: NodeId,
    },
    Transpose {
        x: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    AddRow {
        x: NodeId,
        row: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        x: NodeId,
        alpha: f64,
    },
    ScaleBy {
        x: NodeId,
        s: NodeId,
    },
    Concat {
        axis: usize,
        parts: Vec<NodeId>,
    },
    Slice {
        x: NodeId,
        axis: usize,
        start: usize,
        len: usize,
    },
    Embedding {
        table: NodeId,
        ids: Vec<u32>,
    },
    Tanh {
        x: NodeId,
    },
    Sigmoid {
        x: NodeId,
    },
    Relu {
        x: NodeId,
    },
    Exp {
        x: NodeId,
    },
    Softmax {
        x: NodeId,
    },
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Dropout {
        x: NodeId,
        keep_scale: f64,
        mask: Vec<bool>,
    },
    Sum {
        x: NodeId,
    },
    Mean {
        x: NodeId,
    },
    L2Norm {
        x: NodeId,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<u32>,
        smoothing: f64,
        probs: Tensor,
    },
    ReverseRows {
        x: NodeId,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients of one backward sweep, indexed by tape node.
#[derive(Debug)]
pub struct BackwardPass {
    grads: Vec<Option<Tensor>>,
}

impl BackwardPass {
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }
}

/// Layer-normalization epsilon used everywhere in the crate.
pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_ids: BTreeMap<String, NodeId>,
    taps: BTreeMap<String, NodeId>,
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

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value, op });
        id
    }

    fn node(&self, id: NodeId) -> Result<&Node> {
        self.nodes
            .get(id.0)
            .ok_or_else(|| Error::Invalid(format!("node id {} not on this tape", id.0)))
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Record a constant leaf. Gradients may flow to it but are not surfaced
    /// unless it is tapped.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Load a named parameter from the store as a leaf, memoized so repeated
    /// uses share one node and their gradients accumulate.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.param_ids.get(name) {
            return Ok(id);
        }
        let value = store.get(name)?.clone();
        let id = self.push(value, Op::Leaf);
        self.param_ids.insert(name.to_string(), id);
        Ok(id)
    }

    /// Register a named tap at an existing node. Tap gradients are surfaced
    /// by `tap_grads` after a backward sweep.
    pub fn tap(&mut self, name: &str, id: NodeId) -> Result<()> {
        self.node(id)?;
        if self.taps.contains_key(name) {
            return Err(Error::Invalid(format!("duplicate tap name `{name}`")));
        }
        self.taps.insert(name.to_string(), id);
        Ok(())
    }

    pub fn tap_names(&self) -> impl Iterator<Item = &str> {
        self.taps.keys().map(String::as_str)
    }

    // ---- primitives ----------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.node(a)?.value, &self.node(b)?.value);
        if !ta.is_matrix() || !tb.is_matrix() || ta.cols() != tb.rows() {
            return Err(Error::Shape(format!(
                "matmul {:?} x {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let out = mat_mul(ta, tb);
        Ok(self.push(out, Op::Matmul { a, b }))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let t = &self.node(x)?.value;
        if !t.is_matrix() {
            return Err(Error::Shape(format!("transpose of {:?}", t.shape())));
        }
        let (m, n) = (t.rows(), t.cols());
        let mut out = Tensor::zeros(vec![n, m]);
        for i in 0..m {
            for j in 0..n {
                out.set2(j, i, t.at2(i, j));
            }
        }
        Ok(self.push(out, Op::Transpose { x }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.node(a)?.value, &self.node(b)?.value);
        if ta.shape() != tb.shape() {
            return Err(Error::Shape(format!(
                "add {:?} + {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Add { a, b }))
    }

    /// Broadcast-add a length-n vector to every row of an (m, n) matrix.
    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> Result<NodeId> {
        let (tx, tr) = (&self.node(x)?.value, &self.node(row)?.value);
        let n = tx.shape().last().copied().unwrap_or(0);
        if tr.len() != n {
            return Err(Error::Shape(format!(
                "add_row {:?} + row of {}",
                tx.shape(),
                tr.len()
            )));
        }
        let mut out = tx.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += tr.data()[i % n];
        }
        Ok(self.push(out, Op::AddRow { x, row }))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.node(a)?.value, &self.node(b)?.value);
        if ta.shape() != tb.shape() {
            return Err(Error::Shape(format!(
                "multiply {:?} * {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Mul { a, b }))
    }

    /// Multiply by a compile-time constant.
    pub fn scale(&mut self, x: NodeId, alpha: f64) -> Result<NodeId> {
        let t = &self.node(x)?.value;
        let data = t.data().iter().map(|v| alpha * v).collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Scale { x, alpha }))
    }

    /// Multiply by a dynamic (differentiable) scalar node.
    pub fn scale_by(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let ts = &self.node(s)?.value;
        if !ts.is_scalar() {
            return Err(Error::Shape(format!(
                "scale_by scalar has shape {:?}",
                ts.shape()
            )));
        }
        let sv = ts.data()[0];
        let t = &self.node(x)?.value;
        let data = t.data().iter().map(|v| sv * v).collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(out, Op::ScaleBy { x, s }))
    }

    /// Concatenate matrices along axis 0 (rows) or 1 (columns).
    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Invalid("concat of zero tensors".into()));
        }
        if axis > 1 {
            return Err(Error::Invalid(format!("concat axis {axis} out of range")));
        }
        let tensors: Vec<&Tensor> = parts
            .iter()
            .map(|&p| self.node(p).map(|n| &n.value))
            .collect::<Result<_>>()?;
        if tensors.iter().any(|t| !t.is_matrix()) {
            return Err(Error::Shape("concat expects matrices".into()));
        }
        let out = if axis == 0 {
            let cols = tensors[0].cols();
            if tensors.iter().any(|t| t.cols() != cols) {
                return Err(Error::Shape("concat axis 0 needs equal columns".into()));
            }
            let rows: usize = tensors.iter().map(|t| t.rows()).sum();
            let mut data = Vec::with_capacity(rows * cols);
            for t in &tensors {
                data.extend_from_slice(t.data());
            }
            Tensor::new(vec![rows, cols], data)?
        } else {
            let rows = tensors[0].rows();
            if tensors.iter().any(|t| t.rows() != rows) {
                return Err(Error::Shape("concat axis 1 needs equal rows".into()));
            }
            let cols: usize = tensors.iter().map(|t| t.cols()).sum();
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for t in &tensors {
                    data.extend_from_slice(t.row(r));
                }
            }
            Tensor::new(vec![rows, cols], data)?
        };
        Ok(self.push(
            out,
            Op::Concat {
                axis,
                parts: parts.to_vec(),
            },
        ))
    }

    /// Contiguous slice of a matrix along one axis.
    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, end: usize) -> Result<NodeId> {
        let t = &self.node(x)?.value;
        if !t.is_matrix() || axis > 1 {
            return Err(Error::Shape(format!(
                "slice axis {axis} of {:?}",
                t.shape()
            )));
        }
        let bound = t.shape()[axis];
        if start >= end || end > bound {
            return Err(Error::Invalid(format!(
                "slice range {start}..{end} out of bounds for axis of {bound}"
            )));
        }
        let len = end - start;
        let out = if axis == 0 {
            let cols = t.cols();
            Tensor::new(vec![len, cols], t.data()[start * cols..end * cols].to_vec())?
        } else {
            let rows = t.rows();
            let mut data = Vec::with_capacity(rows * len);
            for r in 0..rows {
                data.extend_from_slice(&t.row(r)[start..end]);
            }
            Tensor::new(vec![rows, len], data)?
        };
        Ok(self.push(
            out,
            Op::Slice {
                x,
                axis,
                start,
                len,
            },
        ))
    }

    /// Gather rows of an embedding table by token id.
    pub fn embedding(&mut self, table: NodeId, ids: &[u32]) -> Result<NodeId> {
        let t = &self.node(table)?.value;
        if !t.is_matrix() {
            return Err(Error::Shape(format!("embedding table of {:?}", t.shape())));
        }
        let vocab = t.rows();
        let dim = t.cols();
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id as usize >= vocab {
                return Err(Error::Vocab {
                    id,
                    vocab_size: vocab,
                });
            }
            data.extend_from_slice(t.row(id as usize));
        }
        let out = Tensor::new(vec![ids.len(), dim], data)?;
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        let out = self.map_unary(x, f64::tanh)?;
        Ok(self.push(out, Op::Tanh { x }))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let out = self.map_unary(x, |v| 1.0 / (1.0 + (-v).exp()))?;
        Ok(self.push(out, Op::Sigmoid { x }))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let out = self.map_unary(x, |v| v.max(0.0))?;
        Ok(self.push(out, Op::Relu { x }))
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        let out = self.map_unary(x, f64::exp)?;
        Ok(self.push(out, Op::Exp { x }))
    }

    fn map_unary(&self, x: NodeId, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        let t = &self.node(x)?.value;
        let data = t.data().iter().map(|&v| f(v)).collect();
        Tensor::new(t.shape().to_vec(), data)
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let t = &self.node(x)?.value;
        let out = softmax_last_axis(t)?;
        Ok(self.push(out, Op::Softmax { x }))
    }

    /// Layer normalization over the last axis with learnable gain and bias.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let t = &self.node(x)?.value;
        let n = t.shape().last().copied().unwrap_or(0);
        if n == 0 {
            return Err(Error::Shape("layer_norm of empty tensor".into()));
        }
        let (tg, tb) = (&self.node(gain)?.value, &self.node(bias)?.value);
        if tg.len() != n || tb.len() != n {
            return Err(Error::Shape(format!(
                "layer_norm gain/bias of {}/{} for last axis {n}",
                tg.len(),
                tb.len()
            )));
        }
        let rows = t.len() / n;
        let mut xhat = Tensor::zeros(t.shape().to_vec());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Tensor::zeros(t.shape().to_vec());
        for r in 0..rows {
            let x_row = &t.data()[r * n..(r + 1) * n];
            let mean = x_row.iter().sum::<f64>() / n as f64;
            let var = x_row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let istd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(istd);
            for c in 0..n {
                let h = (x_row[c] - mean) * istd;
                xhat.data_mut()[r * n + c] = h;
                out.data_mut()[r * n + c] = h * tg.data()[c] + tb.data()[c];
            }
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    /// Inverted dropout: scales kept entries by 1/(1-rate) at train time and
    /// is the identity (no node recorded, no rng consumed) otherwise.
    pub fn dropout(
        &mut self,
        x: NodeId,
        rate: f64,
        training: bool,
        rng: &mut RngStream,
    ) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Invalid(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let t = &self.node(x)?.value;
        let mask = rng.keep_mask(t.len(), rate);
        let keep_scale = 1.0 / (1.0 - rate);
        let data = t
            .data()
            .iter()
            .zip(&mask)
            .map(|(&v, &keep)| if keep { v * keep_scale } else { 0.0 })
            .collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(
            out,
            Op::Dropout {
                x,
                keep_scale,
                mask,
            },
        ))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let t = &self.node(x)?.value;
        let out = Tensor::scalar(t.data().iter().sum());
        Ok(self.push(out, Op::Sum { x }))
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let t = &self.node(x)?.value;
        if t.is_empty() {
            return Err(Error::Shape("mean of empty tensor".into()));
        }
        let out = Tensor::scalar(t.data().iter().sum::<f64>() / t.len() as f64);
        Ok(self.push(out, Op::Mean { x }))
    }

    pub fn l2_norm(&mut self, x: NodeId) -> Result<NodeId> {
        let t = &self.node(x)?.value;
        let out = Tensor::scalar(t.l2_norm());
        Ok(self.push(out, Op::L2Norm { x }))
    }

    /// Per-position cross entropy with logits, returned as a length-L vector.
    /// `smoothing` mixes the one-hot target with the uniform distribution.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[u32],
        smoothing: f64,
    ) -> Result<NodeId> {
        let t = &self.node(logits)?.value;
        if !t.is_matrix() || t.rows() != targets.len() {
            return Err(Error::Shape(format!(
                "cross_entropy logits {:?} vs {} targets",
                t.shape(),
                targets.len()
            )));
        }
        if !(0.0..1.0).contains(&smoothing) {
            return Err(Error::Invalid(format!(
                "label smoothing {smoothing} outside [0, 1)"
            )));
        }
        let vocab = t.cols();
        let mut probs = Tensor::zeros(vec![targets.len(), vocab]);
        let mut losses = Vec::with_capacity(targets.len());
        for (r, &target) in targets.iter().enumerate() {
            if target as usize >= vocab {
                return Err(Error::Vocab {
                    id: target,
                    vocab_size: vocab,
                });
            }
            let row = t.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum_exp: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum_exp.ln();
            for c in 0..vocab {
                probs.set2(r, c, (row[c] - max).exp() / sum_exp);
            }
            // loss = lse - sum_c q_c * logit_c, q = smoothed one-hot
            let uniform = smoothing / vocab as f64;
            let mut dot = 0.0;
            for (c, &l) in row.iter().enumerate() {
                let q = uniform
                    + if c == target as usize {
                        1.0 - smoothing
                    } else {
                        0.0
                    };
                dot += q * l;
            }
            losses.push(lse - dot);
        }
        let out = Tensor::new(vec![targets.len()], losses)?;
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                smoothing,
                probs,
            },
        ))
    }

    /// Reverse the row order of a matrix (time reversal for the backward RNN).
    pub fn reverse_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let t = &self.node(x)?.value;
        if !t.is_matrix() {
            return Err(Error::Shape(format!("reverse_rows of {:?}", t.shape())));
        }
        let (m, n) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(m * n);
        for r in (0..m).rev() {
            data.extend_from_slice(t.row(r));
        }
        let out = Tensor::new(vec![m, n], data)?;
        Ok(self.push(out, Op::ReverseRows { x }))
    }

    // ---- backward -------------------------------------------------------

    /// Backward from a scalar loss node, seeding with d(loss)/d(loss) = 1.
    pub fn backward(&self, loss: NodeId) -> Result<BackwardPass> {
        let t = &self.node(loss)?.value;
        if !t.is_scalar() {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got {:?}",
                t.shape()
            )));
        }
        self.backward_from(loss, Tensor::new(t.shape().to_vec(), vec![1.0])?)
    }

    /// Backward from any node with a caller-supplied upstream gradient.
    pub fn backward_from(&self, start: NodeId, seed: Tensor) -> Result<BackwardPass> {
        if self.nodes.is_empty() {
            return Err(Error::Invalid("backward on an empty tape".into()));
        }
        let t = &self.node(start)?.value;
        if t.shape() != seed.shape() {
            return Err(Error::Shape(format!(
                "backward seed {:?} vs node {:?}",
                seed.shape(),
                t.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[start.0] = Some(seed);

        for idx in (0..=start.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.pull_back(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(BackwardPass { grads })
    }

    fn pull_back(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                accumulate(grads, *a, mat_mul_nt(g, tb))?;
                accumulate(grads, *b, mat_mul_tn(ta, g))?;
            }
            Op::Transpose { x } => {
                let (m, n) = (g.rows(), g.cols());
                let mut gx = Tensor::zeros(vec![n, m]);
                for i in 0..m {
                    for j in 0..n {
                        gx.set2(j, i, g.at2(i, j));
                    }
                }
                accumulate(grads, *x, gx)?;
            }
            Op::Add { a, b } => {
                accumulate(grads, *a, g.clone())?;
                accumulate(grads, *b, g.clone())?;
            }
            Op::AddRow { x, row } => {
                accumulate(grads, *x, g.clone())?;
                let n = self.nodes[row.0].value.len();
                let mut gr = Tensor::zeros(self.nodes[row.0].value.shape().to_vec());
                for (i, &v) in g.data().iter().enumerate() {
                    gr.data_mut()[i % n] += v;
                }
                accumulate(grads, *row, gr)?;
            }
            Op::Mul { a, b } => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                accumulate(grads, *a, elementwise_mul(g, tb))?;
                accumulate(grads, *b, elementwise_mul(g, ta))?;
            }
            Op::Scale { x, alpha } => {
                let data = g.data().iter().map(|v| alpha * v).collect();
                accumulate(grads, *x, Tensor::new(g.shape().to_vec(), data)?)?;
            }
            Op::ScaleBy { x, s } => {
                let sv = self.nodes[s.0].value.data()[0];
                let tx = &self.nodes[x.0].value;
                let data = g.data().iter().map(|v| sv * v).collect();
                accumulate(grads, *x, Tensor::new(g.shape().to_vec(), data)?)?;
                let dot: f64 = g.data().iter().zip(tx.data()).map(|(gv, xv)| gv * xv).sum();
                accumulate(grads, *s, Tensor::scalar(dot))?;
            }
            Op::Concat { axis, parts } => {
                if *axis == 0 {
                    let mut offset = 0;
                    for &p in parts {
                        let t = &self.nodes[p.0].value;
                        let rows = t.rows();
                        let cols = t.cols();
                        let data = g.data()[offset * cols..(offset + rows) * cols].to_vec();
                        accumulate(grads, p, Tensor::new(vec![rows, cols], data)?)?;
                        offset += rows;
                    }
                } else {
                    let rows = g.rows();
                    let mut offset = 0;
                    for &p in parts {
                        let t = &self.nodes[p.0].value;
                        let cols = t.cols();
                        let mut data = Vec::with_capacity(rows * cols);
                        for r in 0..rows {
                            data.extend_from_slice(&g.row(r)[offset..offset + cols]);
                        }
                        accumulate(grads, p, Tensor::new(vec![rows, cols], data)?)?;
                        offset += cols;
                    }
                }
            }
            Op::Slice {
                x,
                axis,
                start,
                len,
            } => {
                let t = &self.nodes[x.0].value;
                let mut gx = Tensor::zeros(t.shape().to_vec());
                let cols = t.cols();
                if *axis == 0 {
                    gx.data_mut()[start * cols..(start + len) * cols].copy_from_slice(g.data());
                } else {
                    for r in 0..t.rows() {
                        for c in 0..*len {
                            gx.data_mut()[r * cols + start + c] = g.at2(r, c);
                        }
                    }
                }
                accumulate(grads, *x, gx)?;
            }
            Op::Embedding { table, ids } => {
                let t = &self.nodes[table.0].value;
                let dim = t.cols();
                let mut gt = Tensor::zeros(t.shape().to_vec());
                for (r, &id) in ids.iter().enumerate() {
                    let row = id as usize;
                    for c in 0..dim {
                        gt.data_mut()[row * dim + c] += g.at2(r, c);
                    }
                }
                accumulate(grads, *table, gt)?;
            }
            Op::Tanh { x } => {
                let y = &node.value;
                let data = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(gv, yv)| gv * (1.0 - yv * yv))
                    .collect();
                accumulate(grads, *x, Tensor::new(g.shape().to_vec(), data)?)?;
            }
            Op::Sigmoid { x } => {
                let y = &node.value;
                let data = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(gv, yv)| gv * yv * (1.0 - yv))
                    .collect();
                accumulate(grads, *x, Tensor::new(g.shape().to_vec(), data)?)?;
            }
            Op::Relu { x } => {
                let tx = &self.nodes[x.0].value;
                let data = g
                    .data()
                    .iter()
                    .zip(tx.data())
                    .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                accumulate(grads, *x, Tensor::new(g.shape().to_vec(), data)?)?;
            }
            Op::Exp { x } => {
                let y = &node.value;
                accumulate(grads, *x, elementwise_mul(g, y))?;
            }
            Op::Softmax { x } => {
                let y = &node.value;
                let n = y.shape().last().copied().unwrap_or(1);
                let rows = y.len() / n;
                let mut gx = Tensor::zeros(y.shape().to_vec());
                for r in 0..rows {
                    let ys = &y.data()[r * n..(r + 1) * n];
                    let gs = &g.data()[r * n..(r + 1) * n];
                    let dot: f64 = ys.iter().zip(gs).map(|(yv, gv)| yv * gv).sum();
                    for c in 0..n {
                        gx.data_mut()[r * n + c] = ys[c] * (gs[c] - dot);
                    }
                }
                accumulate(grads, *x, gx)?;
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let tg = &self.nodes[gain.0].value;
                let n = tg.len();
                let rows = xhat.len() / n;
                let mut gx = Tensor::zeros(xhat.shape().to_vec());
                let mut ggain = Tensor::zeros(tg.shape().to_vec());
                let mut gbias = Tensor::zeros(self.nodes[bias.0].value.shape().to_vec());
                for r in 0..rows {
                    let hs = &xhat.data()[r * n..(r + 1) * n];
                    let gs = &g.data()[r * n..(r + 1) * n];
                    // dy/dgain and dy/dbias
                    for c in 0..n {
                        ggain.data_mut()[c] += gs[c] * hs[c];
                        gbias.data_mut()[c] += gs[c];
                    }
                    // dy/dx: (w - mean(w) - xhat * mean(w . xhat)) * inv_std,
                    // where w = gain . g
                    let mut mean_w = 0.0;
                    let mut mean_wh = 0.0;
                    for c in 0..n {
                        let w = tg.data()[c] * gs[c];
                        mean_w += w;
                        mean_wh += w * hs[c];
                    }
                    mean_w /= n as f64;
                    mean_wh /= n as f64;
                    for c in 0..n {
                        let w = tg.data()[c] * gs[c];
                        gx.data_mut()[r * n + c] = (w - mean_w - hs[c] * mean_wh) * inv_std[r];
                    }
                }
                accumulate(grads, *x, gx)?;
                accumulate(grads, *gain, ggain)?;
                accumulate(grads, *bias, gbias)?;
            }
            Op::Dropout {
                x,
                keep_scale,
                mask,
            } => {
                let data = g
                    .data()
                    .iter()
                    .zip(mask)
                    .map(|(gv, &keep)| if keep { gv * keep_scale } else { 0.0 })
                    .collect();
                accumulate(grads, *x, Tensor::new(g.shape().to_vec(), data)?)?;
            }
            Op::Sum { x } => {
                let t = &self.nodes[x.0].value;
                accumulate(grads, *x, Tensor::full(t.shape().to_vec(), g.data()[0]))?;
            }
            Op::Mean { x } => {
                let t = &self.nodes[x.0].value;
                let v = g.data()[0] / t.len() as f64;
                accumulate(grads, *x, Tensor::full(t.shape().to_vec(), v))?;
            }
            Op::L2Norm { x } => {
                let t = &self.nodes[x.0].value;
                let norm = node.value.data()[0];
                let gx = if norm > 0.0 {
                    let scale = g.data()[0] / norm;
                    let data = t.data().iter().map(|v| v * scale).collect();
                    Tensor::new(t.shape().to_vec(), data)?
                } else {
                    // subgradient 0 at the origin
                    Tensor::zeros(t.shape().to_vec())
                };
                accumulate(grads, *x, gx)?;
            }
            Op::CrossEntropy {
                logits,
                targets,
                smoothing,
                probs,
            } => {
                let vocab = probs.cols();
                let uniform = smoothing / vocab as f64;
                let mut gl = Tensor::zeros(probs.shape().to_vec());
                for (r, &target) in targets.iter().enumerate() {
                    let up = g.data()[r];
                    for c in 0..vocab {
                        let q = uniform
                            + if c == target as usize {
                                1.0 - smoothing
                            } else {
                                0.0
                            };
                        gl.set2(r, c, up * (probs.at2(r, c) - q));
                    }
                }
                accumulate(grads, *logits, gl)?;
            }
            Op::ReverseRows { x } => {
                let (m, n) = (g.rows(), g.cols());
                let mut data = Vec::with_capacity(m * n);
                for r in (0..m).rev() {
                    data.extend_from_slice(g.row(r));
                }
                accumulate(grads, *x, Tensor::new(vec![m, n], data)?)?;
            }
        }
        Ok(())
    }

    /// Named parameter gradients from a backward pass; parameters present in
    /// the store but unused by this tape get zero tensors.
    pub fn param_grads(&self, pass: &BackwardPass, store: &ParamStore) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, value) in store.iter() {
            let grad = self
                .param_ids
                .get(name)
                .and_then(|id| pass.grad(*id))
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(value.shape().to_vec()));
            out.insert(name.to_string(), grad);
        }
        out
    }

    /// Gradients at every registered tap point; taps off the loss path get
    /// zero tensors of the tapped activation's shape.
    pub fn tap_grads(&self, pass: &BackwardPass) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, id) in &self.taps {
            let grad = pass
                .grad(*id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(self.nodes[id.0].value.shape().to_vec()));
            out.insert(name.clone(), grad);
        }
        out
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor) -> Result<()> {
    match &mut grads[id.0] {
        Some(existing) => existing.add_scaled(&delta, 1.0),
        slot @ None => {
            *slot = Some(delta);
            Ok(())
        }
    }
}

fn elementwise_mul(a: &Tensor, b: &Tensor) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Tensor::new(a.shape().to_vec(), data).expect("shapes checked at forward")
}

fn mat_mul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, n) = (a.rows(), b.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let a_row = a.row(i);
        let out_row = &mut out[i * n..(i + 1) * n];
        for (kk, &a_ik) in a_row.iter().enumerate() {
            let b_row = b.row(kk);
            for j in 0..n {
                out_row[j] += a_ik * b_row[j];
            }
        }
    }
    Tensor::new(vec![m, n], out).expect("shape by construction")
}

/// a (m,n) * b^T where b is (k,n) -> (m,k)
fn mat_mul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, n, k) = (a.rows(), a.cols(), b.rows());
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let a_row = a.row(i);
        for j in 0..k {
            let b_row = b.row(j);
            let mut acc = 0.0;
            for c in 0..n {
                acc += a_row[c] * b_row[c];
            }
            out[i * k + j] = acc;
        }
    }
    Tensor::new(vec![m, k], out).expect("shape by construction")
}

/// a^T * b where a is (m,k), b is (m,n) -> (k,n)
fn mat_mul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let a_row = a.row(i);
        let b_row = b.row(i);
        for (c, &a_ic) in a_row.iter().enumerate() {
            let out_row = &mut out[c * n..(c + 1) * n];
            for j in 0..n {
                out_row[j] += a_ic * b_row[j];
            }
        }
    }
    Tensor::new(vec![k, n], out).expect("shape by construction")
}

pub(crate) fn softmax_last_axis(t: &Tensor) -> Result<Tensor> {
    let n = t.shape().last().copied().unwrap_or(0);
    if n == 0 {
        return Err(Error::Shape("softmax of empty tensor".into()));
    }
    let rows = t.len() / n;
    let mut out = Tensor::zeros(t.shape().to_vec());
    for r in 0..rows {
        let row = &t.data()[r * n..(r + 1) * n];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for c in 0..n {
            let e = (row[c] - max).exp();
            out.data_mut()[r * n + c] = e;
            sum += e;
        }
        for c in 0..n {
            out.data_mut()[r * n + c] /= sum;
        }
    }
    Ok(out)
}
