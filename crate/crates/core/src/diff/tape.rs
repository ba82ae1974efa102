use rand::Rng;

use super::{DiffError, Real, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Concat { parts: Vec<NodeId>, axis: usize },
    Slice { src: NodeId, axis: usize, start: usize },
    Gather { table: NodeId, ids: Vec<usize> },
    Dropout { src: NodeId, mask: Vec<F> },
    SoftmaxXent { logits: NodeId, targets: Vec<usize>, probs: Vec<F> },
    WeightedSum { src: NodeId, weights: Vec<F> },
    Scale { src: NodeId, factor: F },
}

#[derive(Debug)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Records a forward computation so it can be differentiated in reverse.
///
/// Nodes are appended in evaluation order, so the recording order is already
/// a topological order of the graph.
#[derive(Debug)]
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> DiffError {
    DiffError::Shape(format!("{op}: incompatible operands {a:?} and {b:?}"))
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<F> {
        &self.nodes[id.0].value
    }

    /// Trainable input; receives a gradient in [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor<F>) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<F>) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    fn push(&mut self, name: &'static str, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> Result<NodeId, DiffError> {
        if !value.all_finite() {
            return Err(DiffError::NonFinite(name));
        }
        self.nodes.push(Node { value, op, needs_grad });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn check(&self, id: NodeId) -> Result<&Tensor<F>, DiffError> {
        self.nodes
            .get(id.0)
            .map(|n| &n.value)
            .ok_or(DiffError::NotRecorded(id.0))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let (av, bv) = (self.check(a)?, self.check(b)?);
        if !av.is_matrix() || !bv.is_matrix() || av.cols() != bv.rows() {
            return Err(shape_err("matmul", av.shape(), bv.shape()));
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        let mut out = vec![F::ZERO; m * n];
        F::gemm(m, k, n, av.data(), false, bv.data(), false, &mut out, F::ZERO);
        let needs = self.needs(&[a, b]);
        self.push("matmul", Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), needs)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let (av, bv) = (self.check(a)?, self.check(b)?);
        if av.shape() != bv.shape() {
            return Err(shape_err("add", av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let needs = self.needs(&[a, b]);
        self.push("add", value, Op::Add(a, b), needs)
    }

    /// Adds a length-`n` bias to every row of an `m x n` matrix.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId, DiffError> {
        let (av, bv) = (self.check(a)?, self.check(bias)?);
        if !av.is_matrix() || bv.len() != av.cols() {
            return Err(shape_err("add_bias", av.shape(), bv.shape()));
        }
        let n = av.cols();
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(n) {
            for (x, &b) in row.iter_mut().zip(bv.data()) {
                *x += b;
            }
        }
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let needs = self.needs(&[a, bias]);
        self.push("add_bias", value, Op::AddBias(a, bias), needs)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let (av, bv) = (self.check(a)?, self.check(b)?);
        if av.shape() != bv.shape() {
            return Err(shape_err("mul", av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let needs = self.needs(&[a, b]);
        self.push("mul", value, Op::Mul(a, b), needs)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        let value = self.check(a)?.map(F::sigmoid);
        let needs = self.needs(&[a]);
        self.push("sigmoid", value, Op::Sigmoid(a), needs)
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        let value = self.check(a)?.map(F::tanh);
        let needs = self.needs(&[a]);
        self.push("tanh", value, Op::Tanh(a), needs)
    }

    /// Concatenates matrices along rows (`axis = 0`) or columns (`axis = 1`).
    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId, DiffError> {
        let first = parts
            .first()
            .ok_or_else(|| DiffError::Invalid("concat of zero tensors".into()))?;
        let fv = self.check(*first)?;
        if !fv.is_matrix() || axis > 1 {
            return Err(DiffError::Shape(format!("concat: expected matrices, got {:?} on axis {axis}", fv.shape())));
        }
        let other = fv.shape()[1 - axis];
        let mut total = 0;
        for &p in parts {
            let pv = self.check(p)?;
            if !pv.is_matrix() || pv.shape()[1 - axis] != other {
                return Err(shape_err("concat", fv.shape(), pv.shape()));
            }
            total += pv.shape()[axis];
        }
        let value = if axis == 0 {
            let mut data = Vec::with_capacity(total * other);
            for &p in parts {
                data.extend_from_slice(self.nodes[p.0].value.data());
            }
            Tensor::new(vec![total, other], data)?
        } else {
            let rows = other;
            let mut data = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for &p in parts {
                    let pv = &self.nodes[p.0].value;
                    let c = pv.cols();
                    data.extend_from_slice(&pv.data()[r * c..(r + 1) * c]);
                }
            }
            Tensor::new(vec![rows, total], data)?
        };
        let needs = self.needs(parts);
        self.push("concat", value, Op::Concat { parts: parts.to_vec(), axis }, needs)
    }

    /// Selects `start..end` along rows (`axis = 0`) or columns (`axis = 1`).
    pub fn slice(&mut self, src: NodeId, axis: usize, start: usize, end: usize) -> Result<NodeId, DiffError> {
        let sv = self.check(src)?;
        if !sv.is_matrix() || axis > 1 || start >= end || end > sv.shape()[axis] {
            return Err(DiffError::Shape(format!(
                "slice: range {start}..{end} on axis {axis} of {:?}",
                sv.shape()
            )));
        }
        let (rows, cols) = (sv.rows(), sv.cols());
        let value = if axis == 0 {
            Tensor::new(vec![end - start, cols], sv.data()[start * cols..end * cols].to_vec())?
        } else {
            let w = end - start;
            let mut data = Vec::with_capacity(rows * w);
            for r in 0..rows {
                data.extend_from_slice(&sv.data()[r * cols + start..r * cols + end]);
            }
            Tensor::new(vec![rows, w], data)?
        };
        let needs = self.needs(&[src]);
        self.push("slice", value, Op::Slice { src, axis, start }, needs)
    }

    /// Row gather: output row `r` is `table[ids[r]]`.
    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId, DiffError> {
        let tv = self.check(table)?;
        if !tv.is_matrix() {
            return Err(DiffError::Shape(format!("gather: table must be a matrix, got {:?}", tv.shape())));
        }
        let (v, e) = (tv.rows(), tv.cols());
        let mut data = Vec::with_capacity(ids.len() * e);
        for &id in ids {
            if id >= v {
                return Err(DiffError::IndexOutOfRange { index: id, bound: v });
            }
            data.extend_from_slice(&tv.data()[id * e..(id + 1) * e]);
        }
        let value = Tensor::new(vec![ids.len(), e], data)?;
        let needs = self.needs(&[table]);
        self.push("gather", value, Op::Gather { table, ids: ids.to_vec() }, needs)
    }

    /// Inverted dropout: kept units are scaled by `1 / (1 - rate)`.
    /// A zero rate returns `src` unchanged.
    pub fn dropout<R: Rng + ?Sized>(&mut self, src: NodeId, rate: f64, rng: &mut R) -> Result<NodeId, DiffError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(DiffError::Invalid(format!("dropout rate {rate} outside [0, 1)")));
        }
        let sv = self.check(src)?;
        if rate == 0.0 {
            return Ok(src);
        }
        let keep = F::from_f64(1.0 / (1.0 - rate));
        let mask: Vec<F> = (0..sv.len())
            .map(|_| if rng.gen::<f64>() < rate { F::ZERO } else { keep })
            .collect();
        let data = sv.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let value = Tensor::new(sv.shape().to_vec(), data)?;
        let needs = self.needs(&[src]);
        self.push("dropout", value, Op::Dropout { src, mask }, needs)
    }

    /// Per-row negative log-likelihood (nats) of `targets` under
    /// `softmax(logits)`; returns a length-`N` vector.
    pub fn softmax_xent(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId, DiffError> {
        let lv = self.check(logits)?;
        if !lv.is_matrix() || lv.rows() != targets.len() {
            return Err(DiffError::Shape(format!(
                "softmax_xent: logits {:?} vs {} targets",
                lv.shape(),
                targets.len()
            )));
        }
        let c = lv.cols();
        let mut probs = vec![F::ZERO; lv.len()];
        let mut losses = Vec::with_capacity(targets.len());
        for (i, (row, &t)) in lv.data().chunks(c).zip(targets).enumerate() {
            if t >= c {
                return Err(DiffError::IndexOutOfRange { index: t, bound: c });
            }
            let max = row.iter().copied().fold(row[0], F::max);
            let mut sum = F::ZERO;
            let out = &mut probs[i * c..(i + 1) * c];
            for (p, &z) in out.iter_mut().zip(row) {
                *p = (z - max).exp();
                sum += *p;
            }
            let lse = sum.ln() + max;
            let inv = F::ONE / sum;
            for p in out.iter_mut() {
                *p *= inv;
            }
            losses.push(lse - row[t]);
        }
        let value = Tensor::new(vec![targets.len()], losses)?;
        let needs = self.needs(&[logits]);
        self.push(
            "softmax_xent",
            value,
            Op::SoftmaxXent {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            needs,
        )
    }

    /// `sum_i weights[i] * src[i]` as a scalar.
    pub fn weighted_sum(&mut self, src: NodeId, weights: &[F]) -> Result<NodeId, DiffError> {
        let sv = self.check(src)?;
        if sv.len() != weights.len() {
            return Err(DiffError::Shape(format!(
                "weighted_sum: {} values vs {} weights",
                sv.len(),
                weights.len()
            )));
        }
        let total = sv.data().iter().zip(weights).fold(F::ZERO, |acc, (&x, &w)| acc + x * w);
        let needs = self.needs(&[src]);
        self.push(
            "weighted_sum",
            Tensor::scalar(total),
            Op::WeightedSum {
                src,
                weights: weights.to_vec(),
            },
            needs,
        )
    }

    pub fn mean(&mut self, src: NodeId) -> Result<NodeId, DiffError> {
        let n = self.check(src)?.len();
        let w = F::ONE / F::from_f64(n as f64);
        self.weighted_sum(src, &vec![w; n])
    }

    pub fn scale(&mut self, src: NodeId, factor: F) -> Result<NodeId, DiffError> {
        let value = self.check(src)?.map(|x| x * factor);
        let needs = self.needs(&[src]);
        self.push("scale", value, Op::Scale { src, factor }, needs)
    }

    /// Reverse pass from a scalar node. Returns gradients for every
    /// trainable leaf reachable from `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<F>, DiffError> {
        let lv = self.check(loss)?;
        if lv.len() != 1 {
            return Err(DiffError::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::ONE]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        let leaves = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                let node = &self.nodes[i];
                match (g, &node.op) {
                    (Some(g), Op::Leaf) if node.needs_grad => Some(Tensor::new(node.value.shape().to_vec(), g).expect("grad shape")),
                    _ => None,
                }
            })
            .collect();
        Ok(Gradients { leaves })
    }

    fn propagate(&self, node: &Node<F>, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let nodes = &self.nodes;
        let mut acc = |id: NodeId, f: &mut dyn FnMut(&mut [F])| {
            let n = &nodes[id.0];
            if !n.needs_grad {
                return;
            }
            let buf = grads[id.0].get_or_insert_with(|| vec![F::ZERO; n.value.len()]);
            f(buf);
        };
        let val = |id: NodeId| &nodes[id.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                acc(*a, &mut |d| F::gemm(m, n, k, g, false, bv.data(), true, d, F::ONE));
                acc(*b, &mut |d| F::gemm(k, m, n, av.data(), true, g, false, d, F::ONE));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::AddBias(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                let n = val(*b).len();
                acc(*b, &mut |d| {
                    for row in g.chunks(n) {
                        add_into(d, row);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |d| {
                    for ((d, &g), &y) in d.iter_mut().zip(g).zip(bv) {
                        *d += g * y;
                    }
                });
                acc(*b, &mut |d| {
                    for ((d, &g), &x) in d.iter_mut().zip(g).zip(av) {
                        *d += g * x;
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                acc(*a, &mut |d| {
                    for ((d, &g), &y) in d.iter_mut().zip(g).zip(y) {
                        *d += g * y * (F::ONE - y);
                    }
                });
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                acc(*a, &mut |d| {
                    for ((d, &g), &y) in d.iter_mut().zip(g).zip(y) {
                        *d += g * (F::ONE - y * y);
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let pv = val(p);
                    if *axis == 0 {
                        let len = pv.len();
                        acc(p, &mut |d| add_into(d, &g[offset..offset + len]));
                        offset += len;
                    } else {
                        let c = pv.cols();
                        acc(p, &mut |d| {
                            for (r, drow) in d.chunks_mut(c).enumerate() {
                                add_into(drow, &g[r * total + offset..r * total + offset + c]);
                            }
                        });
                        offset += c;
                    }
                }
            }
            Op::Slice { src, axis, start } => {
                let cols = val(*src).cols();
                if *axis == 0 {
                    acc(*src, &mut |d| add_into(&mut d[start * cols..start * cols + g.len()], g));
                } else {
                    let w = node.value.cols();
                    acc(*src, &mut |d| {
                        for (r, grow) in g.chunks(w).enumerate() {
                            add_into(&mut d[r * cols + start..r * cols + start + w], grow);
                        }
                    });
                }
            }
            Op::Gather { table, ids } => {
                let e = val(*table).cols();
                acc(*table, &mut |d| {
                    for (grow, &id) in g.chunks(e).zip(ids) {
                        add_into(&mut d[id * e..(id + 1) * e], grow);
                    }
                });
            }
            Op::Dropout { src, mask } => {
                acc(*src, &mut |d| {
                    for ((d, &g), &m) in d.iter_mut().zip(g).zip(mask) {
                        *d += g * m;
                    }
                });
            }
            Op::SoftmaxXent { logits, targets, probs } => {
                let c = val(*logits).cols();
                acc(*logits, &mut |d| {
                    for (i, (&gi, &t)) in g.iter().zip(targets).enumerate() {
                        let row = &mut d[i * c..(i + 1) * c];
                        for (dv, &p) in row.iter_mut().zip(&probs[i * c..(i + 1) * c]) {
                            *dv += gi * p;
                        }
                        row[t] -= gi;
                    }
                });
            }
            Op::WeightedSum { src, weights } => {
                let g0 = g[0];
                acc(*src, &mut |d| {
                    for (d, &w) in d.iter_mut().zip(weights) {
                        *d += g0 * w;
                    }
                });
            }
            Op::Scale { src, factor } => {
                acc(*src, &mut |d| {
                    for (d, &g) in d.iter_mut().zip(g) {
                        *d += g * *factor;
                    }
                });
            }
        }
    }
}

#[inline]
fn add_into<F: Real>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<F> {
    leaves: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Gradients<F> {
    /// Gradient of a leaf; `None` when the leaf did not influence the loss.
    pub fn get(&self, id: NodeId) -> Option<&Tensor<F>> {
        self.leaves.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<F>> {
        self.leaves.get_mut(id.0).and_then(Option::take)
    }
}
