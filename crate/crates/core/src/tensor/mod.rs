//! Dense f64 tensors and tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] owns every tensor created during a forward pass. Applying an
//! op validates shapes, computes the output eagerly, and appends one
//! [`OpStep`] to the graph's [`ComputationRecord`]. [`Graph::backward`] walks
//! the record in reverse, accumulating gradients only into nodes that can
//! reach a `requires_grad` leaf; frozen leaves never get a gradient buffer.
//!
//! The record stores whatever the forward pass sampled (dropout masks, gather
//! indices, loss targets), so [`Graph::replay`] reproduces every recorded
//! output bit for bit.

mod gradcheck;
mod kernels;

pub use gradcheck::{
    finite_diff_check, op_checks, sample_coords, FiniteDiffReport, OpCheck, GRADCHECK_H,
    GRADCHECK_TOL,
};

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use kernels::{mm_nn_acc, mm_nt_acc, mm_tn_acc, transpose_into};

// ── Tensor ──────────────────────────────────────────────────────────────

/// Dense row-major f64 tensor. Shape extents are positive; `data.len()` is
/// their product. Values are immutable once the tensor is built; only the
/// gradient slot changes, during [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        Self::from_shared(shape, Arc::new(data))
    }

    /// Build a tensor that shares an existing buffer (used for model
    /// parameters, so each training step need not copy them).
    pub fn from_shared(shape: Vec<usize>, data: Arc<Vec<f64>>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&e| e == 0) {
            return Err(Error::Contract(format!(
                "tensor shape must have positive extents, got {shape:?}"
            )));
        }
        let want: usize = shape.iter().product();
        if data.len() != want {
            return Err(Error::Shape {
                op: "tensor_new",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n])
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::new(vec![1], vec![v]).expect("scalar shape is valid")
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable view of the buffer. Copy-on-write: if the buffer is shared
    /// (a graph leaf still holds it), the tensor gets its own copy first.
    pub fn data_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Extent of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("shape is non-empty")
    }

    /// Product of all axes except the last.
    pub fn rows(&self) -> usize {
        self.len() / self.cols()
    }

}

// ── Record ──────────────────────────────────────────────────────────────

#[derive(Debug, Copy, Clone, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

impl TensorId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive op identifiers with their static attributes.
#[derive(Debug, Clone, PartialEq)]
pub enum OpKind {
    MatMul,
    Add,
    Mul,
    Scale(f64),
    Transpose,
    Gather,
    Softmax,
    LayerNorm { eps: f64 },
    Relu,
    CrossEntropy { smoothing: f64, pad: Option<usize> },
    Concat,
    SliceCols { start: usize, len: usize },
    Dropout { rate: f64 },
    Sum,
}

/// Forward-pass state a backward rule or replay needs verbatim.
#[derive(Debug, Clone, PartialEq)]
pub enum Saved {
    None,
    /// Gather row indices.
    Indices(Vec<usize>),
    /// Cross-entropy target ids, one per logits row.
    Targets(Vec<usize>),
    /// Dropout keep-mask, already scaled by 1/(1-rate).
    Mask(Vec<f64>),
}

/// One recorded primitive-op application.
#[derive(Debug, Clone)]
pub struct OpStep {
    pub op: OpKind,
    pub inputs: Vec<TensorId>,
    pub output: TensorId,
    pub saved: Saved,
}

/// Ordered list of op applications; inputs always precede outputs.
#[derive(Debug, Default, Clone)]
pub struct ComputationRecord {
    steps: Vec<OpStep>,
}

impl ComputationRecord {
    pub fn steps(&self) -> &[OpStep] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

// ── Graph ───────────────────────────────────────────────────────────────

#[derive(Debug)]
struct Node {
    tensor: Tensor,
    needs_grad: bool,
}

/// Owns the tensors and the computation record of one forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    record: ComputationRecord,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn record(&self) -> &ComputationRecord {
        &self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a leaf tensor. Its `requires_grad` flag decides whether
    /// backward will materialize a gradient for it.
    pub fn leaf(&mut self, tensor: Tensor) -> TensorId {
        let needs = tensor.requires_grad;
        self.push_node(tensor, needs)
    }

    /// Leaf with `requires_grad = true`.
    pub fn param(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<TensorId> {
        Ok(self.leaf(Tensor::new(shape, data)?.with_grad()))
    }

    /// Leaf with `requires_grad = false`.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<TensorId> {
        Ok(self.leaf(Tensor::new(shape, data)?))
    }

    pub fn tensor(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].tensor
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        self.nodes[id.0].tensor.data()
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        self.nodes[id.0].tensor.shape()
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].tensor.grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.tensor.grad = None;
        }
    }

    fn push_node(&mut self, tensor: Tensor, needs_grad: bool) -> TensorId {
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node { tensor, needs_grad });
        id
    }

    fn push_op(
        &mut self,
        op: OpKind,
        inputs: Vec<TensorId>,
        saved: Saved,
        out_shape: Vec<usize>,
    ) -> Result<TensorId> {
        let in_data: Vec<&[f64]> = inputs.iter().map(|&i| self.data(i)).collect();
        let in_shapes: Vec<&[usize]> = inputs.iter().map(|&i| self.shape(i)).collect();
        let out = exec_step(&op, &saved, &in_data, &in_shapes, &out_shape)?;
        let needs = inputs.iter().any(|&i| self.nodes[i.0].needs_grad);
        let mut t = Tensor::new(out_shape, out)?;
        t.requires_grad = needs;
        let output = self.push_node(t, needs);
        self.record.steps.push(OpStep {
            op,
            inputs,
            output,
            saved,
        });
        Ok(output)
    }

    // ── op constructors ─────────────────────────────────────────────

    /// 2-D matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let out_shape = vec![sa[0], sb[1]];
        self.push_op(OpKind::MatMul, vec![a, b], Saved::None, out_shape)
    }

    /// Elementwise sum. Accepts identical shapes, or a rank-1 right operand
    /// matching the last axis of the left (broadcast over rows).
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let row_broadcast = sb.len() == 1 && sb[0] == *sa.last().unwrap() && sa != sb;
        if sa != sb && !row_broadcast {
            return Err(Error::Shape {
                op: "add",
                lhs: sa,
                rhs: sb,
            });
        }
        self.push_op(OpKind::Add, vec![a, b], Saved::None, sa)
    }

    /// Elementwise product of same-shape tensors.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb {
            return Err(Error::Shape {
                op: "mul",
                lhs: sa,
                rhs: sb,
            });
        }
        self.push_op(OpKind::Mul, vec![a, b], Saved::None, sa)
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> Result<TensorId> {
        let shape = self.shape(a).to_vec();
        self.push_op(OpKind::Scale(c), vec![a], Saved::None, shape)
    }

    /// 2-D transpose (materialized).
    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 {
            return Err(Error::Shape {
                op: "transpose",
                lhs: sa,
                rhs: vec![],
            });
        }
        let out_shape = vec![sa[1], sa[0]];
        self.push_op(OpKind::Transpose, vec![a], Saved::None, out_shape)
    }

    /// Row lookup: `table [V,d]` and `indices` of length `S` give `[S,d]`.
    pub fn gather(&mut self, table: TensorId, indices: &[usize]) -> Result<TensorId> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return Err(Error::Shape {
                op: "gather",
                lhs: st,
                rhs: vec![indices.len()],
            });
        }
        if indices.is_empty() {
            return Err(Error::Contract("gather with empty index list".into()));
        }
        for &ix in indices {
            if ix >= st[0] {
                return Err(Error::Index {
                    op: "gather",
                    index: ix,
                    bound: st[0],
                });
            }
        }
        let out_shape = vec![indices.len(), st[1]];
        self.push_op(
            OpKind::Gather,
            vec![table],
            Saved::Indices(indices.to_vec()),
            out_shape,
        )
    }

    /// Numerically stable softmax along the last axis.
    pub fn softmax(&mut self, a: TensorId) -> Result<TensorId> {
        let shape = self.shape(a).to_vec();
        self.push_op(OpKind::Softmax, vec![a], Saved::None, shape)
    }

    /// Layer normalization along the last axis with learned gain and bias
    /// (both rank-1, matching the last axis).
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        eps: f64,
    ) -> Result<TensorId> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().unwrap();
        for (name, t) in [("gain", gain), ("bias", bias)] {
            let st = self.shape(t);
            if st != [d] {
                return Err(Error::Shape {
                    op: if name == "gain" {
                        "layer_norm gain"
                    } else {
                        "layer_norm bias"
                    },
                    lhs: sx,
                    rhs: st.to_vec(),
                });
            }
        }
        if eps <= 0.0 {
            return Err(Error::Config(format!("layer_norm eps must be positive, got {eps}")));
        }
        self.push_op(OpKind::LayerNorm { eps }, vec![x, gain, bias], Saved::None, sx)
    }

    pub fn relu(&mut self, a: TensorId) -> Result<TensorId> {
        let shape = self.shape(a).to_vec();
        self.push_op(OpKind::Relu, vec![a], Saved::None, shape)
    }

    /// Label-smoothed token-level cross entropy, averaged over non-pad
    /// positions. `logits` is `[T,V]`; `targets` has length `T`. With
    /// smoothing `e`, the target distribution is `(1-e)` on the gold id plus
    /// `e/V` everywhere. Positions whose target equals `pad` contribute
    /// nothing.
    pub fn cross_entropy(
        &mut self,
        logits: TensorId,
        targets: &[usize],
        smoothing: f64,
        pad: Option<usize>,
    ) -> Result<TensorId> {
        let sl = self.shape(logits).to_vec();
        if sl.len() != 2 {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: sl,
                rhs: vec![targets.len()],
            });
        }
        if targets.len() != sl[0] {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: sl,
                rhs: vec![targets.len()],
            });
        }
        if !(0.0..1.0).contains(&smoothing) {
            return Err(Error::Config(format!(
                "label smoothing must be in [0,1), got {smoothing}"
            )));
        }
        let mut live = 0usize;
        for &t in targets {
            if Some(t) == pad {
                continue;
            }
            live += 1;
            if t >= sl[1] {
                return Err(Error::Index {
                    op: "cross_entropy",
                    index: t,
                    bound: sl[1],
                });
            }
        }
        if live == 0 {
            return Err(Error::Undefined(
                "cross_entropy over only pad positions".into(),
            ));
        }
        self.push_op(
            OpKind::CrossEntropy { smoothing, pad },
            vec![logits],
            Saved::Targets(targets.to_vec()),
            vec![1],
        )
    }

    /// Concatenate along the last axis. All inputs must agree on every other
    /// axis.
    pub fn concat(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::Contract("concat of zero tensors".into()));
        }
        let first = self.shape(parts[0]).to_vec();
        let mut cols = 0usize;
        for &p in parts {
            let sp = self.shape(p);
            if sp.len() != first.len() || sp[..sp.len() - 1] != first[..first.len() - 1] {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: first,
                    rhs: sp.to_vec(),
                });
            }
            cols += sp[sp.len() - 1];
        }
        let mut out_shape = first;
        *out_shape.last_mut().unwrap() = cols;
        self.push_op(OpKind::Concat, parts.to_vec(), Saved::None, out_shape)
    }

    /// Take columns `[start, start+len)` of the last axis.
    pub fn slice_cols(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        let cols = *sa.last().unwrap();
        if len == 0 || start + len > cols {
            return Err(Error::Index {
                op: "slice_cols",
                index: start + len,
                bound: cols,
            });
        }
        let mut out_shape = sa;
        *out_shape.last_mut().unwrap() = len;
        self.push_op(OpKind::SliceCols { start, len }, vec![a], Saved::None, out_shape)
    }

    /// Inverted dropout: each element is kept with probability `1-rate` and
    /// scaled by `1/(1-rate)`. The sampled mask is recorded, so replay and
    /// backward see exactly the forward pass's mask.
    pub fn dropout(&mut self, a: TensorId, rate: f64, rng: &mut ChaCha8Rng) -> Result<TensorId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate must be in [0,1), got {rate}")));
        }
        let shape = self.shape(a).to_vec();
        let n = self.tensor(a).len();
        let keep = 1.0 - rate;
        let mask: Vec<f64> = (0..n)
            .map(|_| {
                if rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        self.push_op(OpKind::Dropout { rate }, vec![a], Saved::Mask(mask), shape)
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, a: TensorId) -> Result<TensorId> {
        self.push_op(OpKind::Sum, vec![a], Saved::None, vec![1])
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar loss. Gradients accumulate into the
    /// `grad` slot of every tensor on a path from a `requires_grad` leaf to
    /// the loss; repeated calls keep adding (callers zero between steps).
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.tensor(loss).len() != 1 {
            return Err(Error::Shape {
                op: "backward",
                lhs: self.shape(loss).to_vec(),
                rhs: vec![1],
            });
        }
        let n = self.nodes.len();
        let mut gbuf: Vec<Option<Vec<f64>>> = vec![None; n];
        if !self.nodes[loss.0].needs_grad {
            return Ok(());
        }
        gbuf[loss.0] = Some(vec![1.0]);

        for si in (0..self.record.steps.len()).rev() {
            let out_id = self.record.steps[si].output;
            let Some(gout) = std::mem::take(&mut gbuf[out_id.0]) else {
                continue;
            };
            self.step_backward(si, &gout, &mut gbuf)?;
            gbuf[out_id.0] = Some(gout);
        }

        for (i, g) in gbuf.into_iter().enumerate() {
            let Some(g) = g else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            match &mut self.nodes[i].tensor.grad {
                Some(existing) => {
                    for (e, v) in existing.iter_mut().zip(&g) {
                        *e += v;
                    }
                }
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn step_backward(
        &self,
        step_index: usize,
        gout: &[f64],
        gbuf: &mut [Option<Vec<f64>>],
    ) -> Result<()> {
        let step = &self.record.steps[step_index];
        let needs = |id: TensorId| self.nodes[id.0].needs_grad;
        let val = |id: TensorId| self.nodes[id.0].tensor.data();
        let shp = |id: TensorId| self.nodes[id.0].tensor.shape();
        let len = |id: TensorId| self.nodes[id.0].tensor.len();

        macro_rules! slot {
            ($id:expr) => {{
                let id: TensorId = $id;
                gbuf[id.0].get_or_insert_with(|| vec![0.0; len(id)])
            }};
        }

        match (&step.op, step.inputs.as_slice()) {
            (OpKind::MatMul, &[a, b]) => {
                let (m, k) = (shp(a)[0], shp(a)[1]);
                let n = shp(b)[1];
                if needs(a) {
                    mm_nt_acc(slot!(a), gout, val(b), m, n, k);
                }
                if needs(b) {
                    mm_tn_acc(slot!(b), val(a), gout, m, k, n);
                }
            }
            (OpKind::Add, &[a, b]) => {
                if needs(a) {
                    let ga = slot!(a);
                    for (g, &v) in ga.iter_mut().zip(gout) {
                        *g += v;
                    }
                }
                if needs(b) {
                    let nb = len(b);
                    let gb = slot!(b);
                    if nb == gout.len() {
                        for (g, &v) in gb.iter_mut().zip(gout) {
                            *g += v;
                        }
                    } else {
                        for (i, &v) in gout.iter().enumerate() {
                            gb[i % nb] += v;
                        }
                    }
                }
            }
            (OpKind::Mul, &[a, b]) => {
                if needs(a) {
                    let bv = val(b);
                    let ga = slot!(a);
                    for i in 0..gout.len() {
                        ga[i] += gout[i] * bv[i];
                    }
                }
                if needs(b) {
                    let av = val(a);
                    let gb = slot!(b);
                    for i in 0..gout.len() {
                        gb[i] += gout[i] * av[i];
                    }
                }
            }
            (OpKind::Scale(c), &[a]) => {
                if needs(a) {
                    let ga = slot!(a);
                    for (g, &v) in ga.iter_mut().zip(gout) {
                        *g += c * v;
                    }
                }
            }
            (OpKind::Transpose, &[a]) => {
                if needs(a) {
                    let (r, c) = (shp(a)[0], shp(a)[1]);
                    let ga = slot!(a);
                    // gout is [c, r]; un-transpose it.
                    for i in 0..c {
                        for j in 0..r {
                            ga[j * c + i] += gout[i * r + j];
                        }
                    }
                }
            }
            (OpKind::Gather, &[table]) => {
                if needs(table) {
                    let Saved::Indices(ix) = &step.saved else {
                        unreachable!("gather saves indices")
                    };
                    let d = shp(table)[1];
                    let gt = slot!(table);
                    for (r, &row) in ix.iter().enumerate() {
                        let src = &gout[r * d..(r + 1) * d];
                        let dst = &mut gt[row * d..(row + 1) * d];
                        for (g, &v) in dst.iter_mut().zip(src) {
                            *g += v;
                        }
                    }
                }
            }
            (OpKind::Softmax, &[a]) => {
                if needs(a) {
                    let y = self.nodes[step.output.0].tensor.data();
                    let d = shp(a).last().copied().unwrap();
                    let ga = slot!(a);
                    for r in 0..y.len() / d {
                        let yr = &y[r * d..(r + 1) * d];
                        let gr = &gout[r * d..(r + 1) * d];
                        let dot: f64 = yr.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum();
                        let dst = &mut ga[r * d..(r + 1) * d];
                        for i in 0..d {
                            dst[i] += yr[i] * (gr[i] - dot);
                        }
                    }
                }
            }
            (OpKind::LayerNorm { eps }, &[x, gain, bias]) => {
                let d = shp(x).last().copied().unwrap();
                let rows = len(x) / d;
                let xv = val(x);
                let gv = val(gain);
                for r in 0..rows {
                    let xr = &xv[r * d..(r + 1) * d];
                    let gr = &gout[r * d..(r + 1) * d];
                    let (mu, inv_std) = row_stats(xr, *eps);
                    if needs(gain) {
                        let gg = slot!(gain);
                        for i in 0..d {
                            gg[i] += gr[i] * (xr[i] - mu) * inv_std;
                        }
                    }
                    if needs(bias) {
                        let gb = slot!(bias);
                        for i in 0..d {
                            gb[i] += gr[i];
                        }
                    }
                    if needs(x) {
                        let mut sum_gy = 0.0;
                        let mut sum_gy_xhat = 0.0;
                        for i in 0..d {
                            let gy = gr[i] * gv[i];
                            sum_gy += gy;
                            sum_gy_xhat += gy * (xr[i] - mu) * inv_std;
                        }
                        let inv_d = 1.0 / d as f64;
                        let gx = slot!(x);
                        let dst = &mut gx[r * d..(r + 1) * d];
                        for i in 0..d {
                            let gy = gr[i] * gv[i];
                            let xhat = (xr[i] - mu) * inv_std;
                            dst[i] +=
                                inv_std * (gy - inv_d * sum_gy - xhat * inv_d * sum_gy_xhat);
                        }
                    }
                }
            }
            (OpKind::Relu, &[a]) => {
                if needs(a) {
                    let xv = val(a);
                    let ga = slot!(a);
                    for i in 0..gout.len() {
                        if xv[i] > 0.0 {
                            ga[i] += gout[i];
                        }
                    }
                }
            }
            (OpKind::CrossEntropy { smoothing, pad }, &[logits]) => {
                if needs(logits) {
                    let Saved::Targets(tg) = &step.saved else {
                        unreachable!("cross_entropy saves targets")
                    };
                    let v = shp(logits)[1];
                    let lv = val(logits);
                    let live = tg.iter().filter(|&&t| Some(t) != *pad).count() as f64;
                    let g0 = gout[0] / live;
                    let gl = slot!(logits);
                    let mut probs = vec![0.0; v];
                    for (r, &t) in tg.iter().enumerate() {
                        if Some(t) == *pad {
                            continue;
                        }
                        softmax_row(&lv[r * v..(r + 1) * v], &mut probs);
                        let dst = &mut gl[r * v..(r + 1) * v];
                        let uni = smoothing / v as f64;
                        for i in 0..v {
                            let q = if i == t { 1.0 - smoothing + uni } else { uni };
                            dst[i] += g0 * (probs[i] - q);
                        }
                    }
                }
            }
            (OpKind::Concat, parts) => {
                let out_cols = self.nodes[step.output.0].tensor.cols();
                let rows = self.nodes[step.output.0].tensor.rows();
                let mut start = 0usize;
                for &p in parts {
                    let w = self.nodes[p.0].tensor.cols();
                    if needs(p) {
                        let gp = slot!(p);
                        for r in 0..rows {
                            let src = &gout[r * out_cols + start..r * out_cols + start + w];
                            let dst = &mut gp[r * w..(r + 1) * w];
                            for (g, &v) in dst.iter_mut().zip(src) {
                                *g += v;
                            }
                        }
                    }
                    start += w;
                }
            }
            (OpKind::SliceCols { start, len: w }, &[a]) => {
                if needs(a) {
                    let cols = shp(a).last().copied().unwrap();
                    let rows = len(a) / cols;
                    let ga = slot!(a);
                    for r in 0..rows {
                        let src = &gout[r * w..(r + 1) * w];
                        let dst = &mut ga[r * cols + start..r * cols + start + w];
                        for (g, &v) in dst.iter_mut().zip(src) {
                            *g += v;
                        }
                    }
                }
            }
            (OpKind::Dropout { .. }, &[a]) => {
                if needs(a) {
                    let Saved::Mask(mask) = &step.saved else {
                        unreachable!("dropout saves its mask")
                    };
                    let ga = slot!(a);
                    for i in 0..gout.len() {
                        ga[i] += gout[i] * mask[i];
                    }
                }
            }
            (OpKind::Sum, &[a]) => {
                if needs(a) {
                    let g0 = gout[0];
                    let ga = slot!(a);
                    for g in ga.iter_mut() {
                        *g += g0;
                    }
                }
            }
            (op, ins) => {
                return Err(Error::Contract(format!(
                    "malformed record step: {op:?} with {} inputs",
                    ins.len()
                )))
            }
        }
        Ok(())
    }

    // ── replay ──────────────────────────────────────────────────────

    /// Re-execute the record from the leaf values and return the recomputed
    /// buffer for every node (leaves are returned as-is).
    pub fn replay(&self) -> Result<Vec<Vec<f64>>> {
        let mut values: Vec<Vec<f64>> = self
            .nodes
            .iter()
            .map(|n| n.tensor.data().to_vec())
            .collect();
        for step in &self.record.steps {
            let in_data: Vec<&[f64]> = step.inputs.iter().map(|&i| values[i.0].as_slice()).collect();
            let in_shapes: Vec<&[usize]> = step.inputs.iter().map(|&i| self.shape(i)).collect();
            let out = exec_step(
                &step.op,
                &step.saved,
                &in_data,
                &in_shapes,
                self.shape(step.output),
            )?;
            values[step.output.0] = out;
        }
        Ok(values)
    }

    /// True when a replay reproduces every recorded output bit for bit.
    pub fn replay_matches(&self) -> Result<bool> {
        let values = self.replay()?;
        Ok(self.nodes.iter().zip(&values).all(|(n, v)| {
            n.tensor.data().len() == v.len()
                && n.tensor
                    .data()
                    .iter()
                    .zip(v)
                    .all(|(a, b)| a.to_bits() == b.to_bits())
        }))
    }
}

// ── shared numeric helpers ──────────────────────────────────────────────

fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let d = row.len() as f64;
    let mu = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|&x| (x - mu) * (x - mu)).sum::<f64>() / d;
    (mu, 1.0 / (var + eps).sqrt())
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        let e = (x - max).exp();
        *o = e;
        z += e;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

/// Execute one op on raw buffers. Both the recording pass and replay go
/// through here, which is what makes replay bit-identical.
fn exec_step(
    op: &OpKind,
    saved: &Saved,
    ins: &[&[f64]],
    in_shapes: &[&[usize]],
    out_shape: &[usize],
) -> Result<Vec<f64>> {
    let out_len: usize = out_shape.iter().product();
    let mut out = vec![0.0; out_len];
    match op {
        OpKind::MatMul => {
            let (m, k) = (in_shapes[0][0], in_shapes[0][1]);
            let n = in_shapes[1][1];
            mm_nn_acc(&mut out, ins[0], ins[1], m, k, n);
        }
        OpKind::Add => {
            let (a, b) = (ins[0], ins[1]);
            if a.len() == b.len() {
                for i in 0..a.len() {
                    out[i] = a[i] + b[i];
                }
            } else {
                let nb = b.len();
                for i in 0..a.len() {
                    out[i] = a[i] + b[i % nb];
                }
            }
        }
        OpKind::Mul => {
            for i in 0..out_len {
                out[i] = ins[0][i] * ins[1][i];
            }
        }
        OpKind::Scale(c) => {
            for i in 0..out_len {
                out[i] = ins[0][i] * c;
            }
        }
        OpKind::Transpose => {
            transpose_into(&mut out, ins[0], in_shapes[0][0], in_shapes[0][1]);
        }
        OpKind::Gather => {
            let Saved::Indices(ix) = saved else {
                unreachable!("gather saves indices")
            };
            let d = in_shapes[0][1];
            for (r, &row) in ix.iter().enumerate() {
                out[r * d..(r + 1) * d].copy_from_slice(&ins[0][row * d..(row + 1) * d]);
            }
        }
        OpKind::Softmax => {
            let d = *in_shapes[0].last().unwrap();
            for r in 0..out_len / d {
                softmax_row(
                    &ins[0][r * d..(r + 1) * d],
                    &mut out[r * d..(r + 1) * d],
                );
            }
        }
        OpKind::LayerNorm { eps } => {
            let d = *in_shapes[0].last().unwrap();
            let (gain, bias) = (ins[1], ins[2]);
            for r in 0..out_len / d {
                let xr = &ins[0][r * d..(r + 1) * d];
                let (mu, inv_std) = row_stats(xr, *eps);
                let dst = &mut out[r * d..(r + 1) * d];
                for i in 0..d {
                    dst[i] = (xr[i] - mu) * inv_std * gain[i] + bias[i];
                }
            }
        }
        OpKind::Relu => {
            for i in 0..out_len {
                out[i] = ins[0][i].max(0.0);
            }
        }
        OpKind::CrossEntropy { smoothing, pad } => {
            let Saved::Targets(tg) = saved else {
                unreachable!("cross_entropy saves targets")
            };
            let v = in_shapes[0][1];
            let mut probs = vec![0.0; v];
            let mut total = 0.0;
            let mut live = 0usize;
            for (r, &t) in tg.iter().enumerate() {
                if Some(t) == *pad {
                    continue;
                }
                live += 1;
                let row = &ins[0][r * v..(r + 1) * v];
                softmax_row(row, &mut probs);
                let uni = smoothing / v as f64;
                let mut nll = 0.0;
                for i in 0..v {
                    let q = if i == t { 1.0 - smoothing + uni } else { uni };
                    if q != 0.0 {
                        nll -= q * probs[i].ln();
                    }
                }
                total += nll;
            }
            out[0] = total / live as f64;
        }
        OpKind::Concat => {
            let out_cols = *out_shape.last().unwrap();
            let rows = out_len / out_cols;
            let mut start = 0usize;
            for (p, sp) in ins.iter().zip(in_shapes) {
                let w = *sp.last().unwrap();
                for r in 0..rows {
                    out[r * out_cols + start..r * out_cols + start + w]
                        .copy_from_slice(&p[r * w..(r + 1) * w]);
                }
                start += w;
            }
        }
        OpKind::SliceCols { start, len: w } => {
            let cols = *in_shapes[0].last().unwrap();
            let rows = ins[0].len() / cols;
            for r in 0..rows {
                out[r * w..(r + 1) * w]
                    .copy_from_slice(&ins[0][r * cols + start..r * cols + start + w]);
            }
        }
        OpKind::Dropout { .. } => {
            let Saved::Mask(mask) = saved else {
                unreachable!("dropout saves its mask")
            };
            for i in 0..out_len {
                out[i] = ins[0][i] * mask[i];
            }
        }
        OpKind::Sum => {
            out[0] = ins[0].iter().sum();
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    // ── forward oracles ─────────────────────────────────────────────

    #[test]
    fn matmul_hand_example() {
        let mut g = Graph::new();
        let a = g.param(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = g.param(vec![2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.data(c), &[2.0, 1.0, 4.0, 3.0]);
        assert_eq!(g.shape(c), &[2, 2]);
    }

    #[test]
    fn matmul_identity_and_zero() {
        let mut g = Graph::new();
        let a = g.param(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, -1.0]).unwrap();
        let eye = g
            .constant(vec![3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0])
            .unwrap();
        let z = g.constant(vec![3, 2], vec![0.0; 6]).unwrap();
        let ai = g.matmul(a, eye).unwrap();
        assert_eq!(g.data(ai), g.data(a));
        let az = g.matmul(a, z).unwrap();
        assert!(g.data(az).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.param(vec![2, 3], vec![0.0; 6]).unwrap();
        let b = g.param(vec![2, 3], vec![0.0; 6]).unwrap();
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn softmax_matches_scalar_evaluation() {
        // Independent scalar route: direct exp/sum without max subtraction.
        let x = [1.0f64, 2.0, 3.0];
        let z: f64 = x.iter().map(|&v| v.exp()).sum();
        let want: Vec<f64> = x.iter().map(|&v| v.exp() / z).collect();

        let mut g = Graph::new();
        let xs = g.param(vec![3], x.to_vec()).unwrap();
        let y = g.softmax(xs).unwrap();
        for (a, b) in g.data(y).iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        let sum: f64 = g.data(y).iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_shift_invariant_and_normalized() {
        let mut rng = stream(11, "softmax-test");
        let x: Vec<f64> = (0..20).map(|_| rng.random_range(-4.0..4.0)).collect();
        let shifted: Vec<f64> = x.iter().map(|&v| v + 123.5).collect();
        let mut g = Graph::new();
        let a = g.param(vec![4, 5], x).unwrap();
        let b = g.param(vec![4, 5], shifted).unwrap();
        let ya = g.softmax(a).unwrap();
        let yb = g.softmax(b).unwrap();
        for (u, v) in g.data(ya).iter().zip(g.data(yb)) {
            assert!((u - v).abs() < 1e-12);
        }
        for r in 0..4 {
            let s: f64 = g.data(ya)[r * 5..(r + 1) * 5].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_matches_scalar_evaluation() {
        // x = [1,2,4], eps = 1e-5, unit gain, zero bias.
        let x = [1.0f64, 2.0, 4.0];
        let mu = 7.0 / 3.0;
        let var = x.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / 3.0;
        let want: Vec<f64> = x.iter().map(|&v| (v - mu) / (var + 1e-5).sqrt()).collect();

        let mut g = Graph::new();
        let xs = g.param(vec![3], x.to_vec()).unwrap();
        let gain = g.constant(vec![3], vec![1.0; 3]).unwrap();
        let bias = g.constant(vec![3], vec![0.0; 3]).unwrap();
        let y = g.layer_norm(xs, gain, bias, 1e-5).unwrap();
        for (a, b) in g.data(y).iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_two_point_and_constant_rows() {
        let mut g = Graph::new();
        let x = g.param(vec![2, 2], vec![1.0, 3.0, 5.0, 5.0]).unwrap();
        let gain = g.constant(vec![2], vec![1.0; 2]).unwrap();
        let bias = g.constant(vec![2], vec![0.0; 2]).unwrap();
        let y = g.layer_norm(x, gain, bias, 1e-12).unwrap();
        let d = g.data(y);
        // [1,3] normalizes to [-1,1] as eps -> 0.
        assert!((d[0] + 1.0).abs() < 1e-6 && (d[1] - 1.0).abs() < 1e-6);
        // constant row maps to zeros (the bias).
        assert!(d[2].abs() < 1e-9 && d[3].abs() < 1e-9);
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut g = Graph::new();
        let x = g.param(vec![4], vec![-2.0, -0.0, 0.5, 3.0]).unwrap();
        let y = g.relu(x).unwrap();
        assert_eq!(g.data(y), &[0.0, 0.0, 0.5, 3.0]);
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_v() {
        let v = 7usize;
        let mut g = Graph::new();
        let logits = g.param(vec![3, v], vec![0.25; 3 * v]).unwrap();
        let loss = g.cross_entropy(logits, &[0, 3, 6], 0.0, None).unwrap();
        assert!((g.data(loss)[0] - (v as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_peaked_logits_is_tiny() {
        let mut g = Graph::new();
        let mut row = vec![0.0; 5];
        row[2] = 50.0;
        let logits = g.param(vec![1, 5], row).unwrap();
        let loss = g.cross_entropy(logits, &[2], 0.0, None).unwrap();
        assert!(g.data(loss)[0] < 1e-6);
    }

    #[test]
    fn cross_entropy_smoothing_matches_scalar_evaluation() {
        // V=3, logits [1,0,0], target 0, smoothing 0.1.
        let (e, s) = (1.0f64.exp(), 0.1);
        let z = e + 2.0;
        let logp = [1.0 - z.ln(), -z.ln(), -z.ln()];
        let uni = s / 3.0;
        let q = [1.0 - s + uni, uni, uni];
        let want: f64 = -(q[0] * logp[0] + q[1] * logp[1] + q[2] * logp[2]);

        let mut g = Graph::new();
        let logits = g.param(vec![1, 3], vec![1.0, 0.0, 0.0]).unwrap();
        let loss = g.cross_entropy(logits, &[0], s, None).unwrap();
        assert!((g.data(loss)[0] - want).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_pad_rows_contribute_nothing() {
        let mut rng = stream(3, "ce-pad");
        let row: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut two = row.clone();
        two.extend(vec![9.0, -9.0, 4.0, 0.0, 1.0, 2.0]); // junk pad row

        let mut g = Graph::new();
        let a = g.param(vec![1, 6], row).unwrap();
        let b = g.param(vec![2, 6], two).unwrap();
        let la = g.cross_entropy(a, &[4], 0.1, Some(0)).unwrap();
        let lb = g.cross_entropy(b, &[4, 0], 0.1, Some(0)).unwrap();
        assert_eq!(g.data(la)[0].to_bits(), g.data(lb)[0].to_bits());

        // gradient of the pad row is exactly zero
        let loss = lb;
        g.backward(loss).unwrap();
        let gb = g.grad(b).unwrap();
        assert!(gb[6..].iter().all(|&v| v == 0.0));
        assert!(gb[..6].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn cross_entropy_out_of_range_target_is_an_index_error() {
        let mut g = Graph::new();
        let logits = g.param(vec![1, 4], vec![0.0; 4]).unwrap();
        let err = g.cross_entropy(logits, &[4], 0.0, None).unwrap_err();
        assert!(matches!(err, Error::Index { .. }), "{err}");
        let all_pad = g.cross_entropy(logits, &[9], 0.0, Some(9)).unwrap_err();
        assert!(matches!(all_pad, Error::Undefined(_)), "{all_pad}");
    }

    #[test]
    fn gather_rows_and_bounds() {
        let mut g = Graph::new();
        let table = g
            .param(vec![3, 2], vec![0.0, 1.0, 10.0, 11.0, 20.0, 21.0])
            .unwrap();
        let y = g.gather(table, &[2, 0, 2]).unwrap();
        assert_eq!(g.data(y), &[20.0, 21.0, 0.0, 1.0, 20.0, 21.0]);
        let err = g.gather(table, &[3]).unwrap_err();
        assert!(matches!(err, Error::Index { index: 3, bound: 3, .. }));
    }

    #[test]
    fn concat_slice_roundtrip() {
        let mut g = Graph::new();
        let a = g.param(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = g.param(vec![2, 3], vec![5.0, 6.0, 7.0, 8.0, 9.0, 10.0]).unwrap();
        let c = g.concat(&[a, b]).unwrap();
        assert_eq!(g.shape(c), &[2, 5]);
        assert_eq!(g.data(c), &[1.0, 2.0, 5.0, 6.0, 7.0, 3.0, 4.0, 8.0, 9.0, 10.0]);
        let a2 = g.slice_cols(c, 0, 2).unwrap();
        let b2 = g.slice_cols(c, 2, 3).unwrap();
        assert_eq!(g.data(a2), g.data(a));
        assert_eq!(g.data(b2), g.data(b));
    }

    #[test]
    fn add_broadcasts_rank1_over_rows() {
        let mut g = Graph::new();
        let a = g.param(vec![2, 3], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let b = g.param(vec![3], vec![10.0, 20.0, 30.0]).unwrap();
        let y = g.add(a, b).unwrap();
        assert_eq!(g.data(y), &[10.0, 21.0, 32.0, 13.0, 24.0, 35.0]);
        let loss = g.sum(y).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(b).unwrap(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn transpose_roundtrips() {
        let mut g = Graph::new();
        let a = g.param(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let t = g.transpose(a).unwrap();
        assert_eq!(g.shape(t), &[3, 2]);
        assert_eq!(g.data(t), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let tt = g.transpose(t).unwrap();
        assert_eq!(g.data(tt), g.data(a));
    }

    #[test]
    fn dropout_rate_zero_is_identity_and_masks_are_seeded() {
        let mut rng = stream(5, "dropout");
        let mut g = Graph::new();
        let x = g.param(vec![10], vec![1.0; 10]).unwrap();
        let y = g.dropout(x, 0.0, &mut rng).unwrap();
        assert_eq!(g.data(y), g.data(x));

        let sample = |seed: u64| {
            let mut rng = stream(seed, "dropout");
            let mut g = Graph::new();
            let x = g.param(vec![64], vec![1.0; 64]).unwrap();
            let y = g.dropout(x, 0.5, &mut rng).unwrap();
            g.data(y).to_vec()
        };
        assert_eq!(sample(7), sample(7));
        assert_ne!(sample(7), sample(8));
        // surviving entries carry the 1/(1-p) scale
        assert!(sample(7).iter().all(|&v| v == 0.0 || v == 2.0));
    }

    // ── backward oracles ────────────────────────────────────────────

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::new();
        let x = g.param(vec![2, 3], vec![0.3; 6]).unwrap();
        let loss = g.sum(x).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn backward_of_sum_of_squares_is_2x() {
        let xs = vec![0.5, -1.0, 2.0, 0.0];
        let mut g = Graph::new();
        let x = g.param(vec![4], xs.clone()).unwrap();
        let xx = g.mul(x, x).unwrap();
        let loss = g.sum(xx).unwrap();
        g.backward(loss).unwrap();
        let want: Vec<f64> = xs.iter().map(|&v| 2.0 * v).collect();
        assert_eq!(g.grad(x).unwrap(), want.as_slice());
    }

    #[test]
    fn backward_accumulates_until_zeroed() {
        let mut g = Graph::new();
        let x = g.param(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let loss = g.sum(x).unwrap();
        g.backward(loss).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0; 3]);
        g.zero_grads();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 3]);
    }

    #[test]
    fn leaf_used_twice_accumulates_both_paths() {
        // loss = sum(x) + sum(x*x) => grad = 1 + 2x
        let xs = vec![1.0, -2.0];
        let mut g = Graph::new();
        let x = g.param(vec![2], xs.clone()).unwrap();
        let s1 = g.sum(x).unwrap();
        let xx = g.mul(x, x).unwrap();
        let s2 = g.sum(xx).unwrap();
        let loss = g.add(s1, s2).unwrap();
        g.backward(loss).unwrap();
        let want: Vec<f64> = xs.iter().map(|&v| 1.0 + 2.0 * v).collect();
        assert_eq!(g.grad(x).unwrap(), want.as_slice());
    }

    #[test]
    fn frozen_leaves_never_materialize_gradients() {
        let mut g = Graph::new();
        let x = g.param(vec![2, 2], vec![1.0; 4]).unwrap();
        let w = g.constant(vec![2, 2], vec![2.0; 4]).unwrap();
        let y = g.matmul(x, w).unwrap();
        let loss = g.sum(y).unwrap();
        g.backward(loss).unwrap();
        assert!(g.grad(w).is_none());
        assert!(g.grad(x).is_some());

        // a graph of only-frozen leaves backpropagates nothing at all
        let mut g2 = Graph::new();
        let a = g2.constant(vec![2], vec![1.0, 2.0]).unwrap();
        let s = g2.sum(a).unwrap();
        g2.backward(s).unwrap();
        assert!(g2.grad(a).is_none() && g2.grad(s).is_none());
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut g = Graph::new();
        let x = g.param(vec![2], vec![1.0, 2.0]).unwrap();
        assert!(matches!(g.backward(x), Err(Error::Shape { .. })));
    }

    // ── per-op finite-difference checks ─────────────────────────────

    /// Check analytic grads of `build`'s output against central differences,
    /// for every input coordinate. `build` must be deterministic.
    fn fd_check_op(
        name: &str,
        param_shapes: &[&[usize]],
        seed: u64,
        build: impl Fn(&mut Graph, &[TensorId]) -> TensorId,
    ) {
        let sizes: Vec<usize> = param_shapes.iter().map(|s| s.iter().product()).collect();
        let total: usize = sizes.iter().sum();
        let mut rng = stream(seed, "fd-op-theta");
        let theta: Vec<f64> = (0..total)
            .map(|_| {
                let v: f64 = rng.random_range(-1.5..1.5);
                // keep away from relu/max kinks
                if v.abs() < 0.2 {
                    v + 0.4 * v.signum() + if v == 0.0 { 0.4 } else { 0.0 }
                } else {
                    v
                }
            })
            .collect();
        let n_out_weights = 257; // enough for any op output in these tests
        let mut wrng = stream(seed, "fd-op-weights");
        let weights: Vec<f64> = (0..n_out_weights)
            .map(|_| wrng.random_range(0.5..1.5))
            .collect();

        // Build the graph at `theta`; return it with param ids and loss id.
        let run = |theta: &[f64]| -> (Graph, Vec<TensorId>, TensorId) {
            let mut g = Graph::new();
            let mut ids = Vec::new();
            let mut off = 0;
            for (shape, &size) in param_shapes.iter().zip(&sizes) {
                let id = g
                    .param(shape.to_vec(), theta[off..off + size].to_vec())
                    .unwrap();
                ids.push(id);
                off += size;
            }
            let out = build(&mut g, &ids);
            let w = g
                .constant(
                    g.shape(out).to_vec(),
                    weights[..g.tensor(out).len()].to_vec(),
                )
                .unwrap();
            let prod = g.mul(out, w).unwrap();
            let loss = g.sum(prod).unwrap();
            (g, ids, loss)
        };

        // analytic gradient once
        let (mut g, ids, loss) = run(&theta);
        g.backward(loss).unwrap();
        let mut analytic = Vec::with_capacity(total);
        for (&id, &size) in ids.iter().zip(&sizes) {
            match g.grad(id) {
                Some(gr) => analytic.extend_from_slice(gr),
                None => analytic.extend(std::iter::repeat(0.0).take(size)),
            }
        }

        let coords: Vec<usize> = (0..total).collect();
        let rep = finite_diff_check(
            |t| {
                let (g, _, loss) = run(t);
                g.data(loss)[0]
            },
            &theta,
            &analytic,
            &coords,
            GRADCHECK_H,
            GRADCHECK_TOL,
        );
        assert!(
            rep.pass,
            "{name}: max_rel_err {} at coord {}",
            rep.max_rel_err, rep.worst_coord
        );
    }

    #[test]
    fn fd_matmul() {
        fd_check_op("matmul", &[&[3, 4], &[4, 2]], 21, |g, p| {
            g.matmul(p[0], p[1]).unwrap()
        });
    }

    #[test]
    fn fd_add_same_shape_and_broadcast() {
        fd_check_op("add", &[&[3, 4], &[3, 4]], 22, |g, p| g.add(p[0], p[1]).unwrap());
        fd_check_op("add-broadcast", &[&[3, 4], &[4]], 23, |g, p| {
            g.add(p[0], p[1]).unwrap()
        });
    }

    #[test]
    fn fd_mul_scale_sum() {
        fd_check_op("mul", &[&[2, 5], &[2, 5]], 24, |g, p| g.mul(p[0], p[1]).unwrap());
        fd_check_op("scale", &[&[7]], 25, |g, p| g.scale(p[0], -2.5).unwrap());
        fd_check_op("sum", &[&[3, 3]], 26, |g, p| {
            let s = g.sum(p[0]).unwrap();
            s
        });
    }

    #[test]
    fn fd_transpose() {
        fd_check_op("transpose", &[&[3, 5]], 27, |g, p| g.transpose(p[0]).unwrap());
    }

    #[test]
    fn fd_gather() {
        fd_check_op("gather", &[&[6, 3]], 28, |g, p| {
            g.gather(p[0], &[0, 5, 2, 2]).unwrap()
        });
    }

    #[test]
    fn fd_softmax() {
        fd_check_op("softmax", &[&[4, 5]], 29, |g, p| g.softmax(p[0]).unwrap());
    }

    #[test]
    fn fd_layer_norm() {
        fd_check_op("layer_norm", &[&[3, 6], &[6], &[6]], 30, |g, p| {
            g.layer_norm(p[0], p[1], p[2], 1e-5).unwrap()
        });
    }

    #[test]
    fn fd_relu() {
        fd_check_op("relu", &[&[4, 4]], 31, |g, p| g.relu(p[0]).unwrap());
    }

    #[test]
    fn fd_cross_entropy_plain_and_smoothed_and_padded() {
        fd_check_op("ce", &[&[3, 6]], 32, |g, p| {
            g.cross_entropy(p[0], &[1, 5, 0], 0.0, None).unwrap()
        });
        fd_check_op("ce-smooth", &[&[3, 6]], 33, |g, p| {
            g.cross_entropy(p[0], &[1, 5, 0], 0.1, None).unwrap()
        });
        fd_check_op("ce-pad", &[&[4, 6]], 34, |g, p| {
            g.cross_entropy(p[0], &[1, 0, 5, 0], 0.0, Some(0)).unwrap()
        });
    }

    #[test]
    fn fd_concat_slice() {
        fd_check_op("concat", &[&[3, 2], &[3, 4]], 35, |g, p| {
            g.concat(&[p[0], p[1]]).unwrap()
        });
        fd_check_op("slice_cols", &[&[3, 6]], 36, |g, p| {
            g.slice_cols(p[0], 1, 3).unwrap()
        });
    }

    #[test]
    fn fd_dropout_with_fixed_mask() {
        fd_check_op("dropout", &[&[4, 4]], 37, |g, p| {
            let mut rng = stream(99, "fd-dropout");
            g.dropout(p[0], 0.4, &mut rng).unwrap()
        });
    }

    #[test]
    fn fd_small_network_chain() {
        // gather -> matmul -> add bias -> relu -> layer_norm -> matmul -> CE
        fd_check_op(
            "chain",
            &[&[5, 4], &[4, 4], &[4], &[4], &[4], &[4, 5]],
            38,
            |g, p| {
                let e = g.gather(p[0], &[1, 4, 0]).unwrap();
                let h = g.matmul(e, p[1]).unwrap();
                let h = g.add(h, p[2]).unwrap();
                let h = g.relu(h).unwrap();
                let h = g.layer_norm(h, p[3], p[4], 1e-5).unwrap();
                let logits = g.matmul(h, p[5]).unwrap();
                g.cross_entropy(logits, &[2, 0, 4], 0.0, None).unwrap()
            },
        );
    }

    // ── record & replay ─────────────────────────────────────────────

    #[test]
    fn record_is_topologically_ordered() {
        let mut g = Graph::new();
        let x = g.param(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = g.softmax(x).unwrap();
        let z = g.matmul(x, y).unwrap();
        let _ = g.sum(z).unwrap();
        for step in g.record().steps() {
            for input in &step.inputs {
                assert!(input.index() < step.output.index());
            }
        }
    }

    #[test]
    fn replay_reproduces_outputs_bit_identically() {
        let mut rng = stream(41, "replay");
        let mut g = Graph::new();
        let x = g
            .param(vec![4, 6], (0..24).map(|i| (i as f64) * 0.173 - 2.0).collect())
            .unwrap();
        let w = g
            .param(vec![6, 6], (0..36).map(|i| ((i * 7) % 13) as f64 * 0.05).collect())
            .unwrap();
        let gain = g.param(vec![6], vec![1.1; 6]).unwrap();
        let bias = g.param(vec![6], vec![-0.1; 6]).unwrap();
        let h = g.matmul(x, w).unwrap();
        let h = g.relu(h).unwrap();
        let h = g.dropout(h, 0.3, &mut rng).unwrap();
        let h = g.layer_norm(h, gain, bias, 1e-5).unwrap();
        let h = g.softmax(h).unwrap();
        let _ = g.cross_entropy(h, &[0, 1, 2, 3], 0.1, None).unwrap();
        assert!(g.replay_matches().unwrap());
    }

    #[test]
    fn gradients_are_deterministic_across_identical_graphs() {
        let run = || {
            let mut rng = stream(55, "det");
            let mut g = Graph::new();
            let x = g
                .param(vec![3, 4], (0..12).map(|i| (i as f64).sin()).collect())
                .unwrap();
            let h = g.softmax(x).unwrap();
            let h = g.dropout(h, 0.25, &mut rng).unwrap();
            let loss = g.sum(h).unwrap();
            g.backward(loss).unwrap();
            g.grad(x).unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
