//! Reverse-mode tape over dense matrices.
//!
//! Operations execute eagerly and are recorded in topological order; `replay`
//! recomputes the whole record after a leaf changes (used by the
//! finite-difference checker), and `backward` walks the record in exact
//! reverse to accumulate gradients. Every op output is scanned for NaN/Inf —
//! a non-finite intermediate is a hard error, not a warning.

use std::collections::BTreeMap;
use std::rc::Rc;

use super::math;
use super::tensor::Tensor;
use super::NumericsError;

/// Handle to a node in a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

#[derive(Clone, Debug)]
enum Op {
    /// Unnamed input (constants, data batches).
    Leaf,
    /// Named input that receives an entry in [`Gradients`].
    Param(String),
    Matmul(NodeId, NodeId),
    /// Elementwise add; rhs may be `1 x c` and broadcasts over rows.
    Add(NodeId, NodeId),
    Hadamard(NodeId, NodeId),
    Scale(NodeId, f64),
    RowGather(NodeId, Rc<Vec<usize>>),
    /// `out[dst[k]] += in[k]` over `out_rows` rows; adjoint of RowGather.
    RowScatterAdd(NodeId, Rc<Vec<usize>>, usize),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Softplus(NodeId),
    SoftmaxRow(NodeId),
    /// Softmax over contiguous segments of an `n x 1` column; `offsets` has a
    /// leading 0 and trailing n.
    SegmentSoftmax(NodeId, Rc<Vec<usize>>),
    ConcatCols(NodeId, NodeId),
    /// Sum of all entries, producing `1 x 1`.
    ReduceSum(NodeId),
    /// Identity forward; blocks gradient flow backward.
    Detach(NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::Matmul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Hadamard(..) => "hadamard",
            Op::Scale(..) => "scale",
            Op::RowGather(..) => "row-gather",
            Op::RowScatterAdd(..) => "row-scatter-add",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Relu(_) => "relu",
            Op::Softplus(_) => "softplus",
            Op::SoftmaxRow(_) => "softmax-row",
            Op::SegmentSoftmax(..) => "segment-softmax",
            Op::ConcatCols(..) => "concat-cols",
            Op::ReduceSum(_) => "reduce-sum",
            Op::Detach(_) => "detach",
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Gradients keyed by parameter name, produced by [`Tape::backward`].
/// Parameters not reachable from the terminal node get zero gradients.
#[derive(Debug)]
pub struct Gradients {
    by_name: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.by_name.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.by_name.iter()
    }

    pub fn len(&self) -> usize {
        self.by_name.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_name.is_empty()
    }
}

/// The recorded computation. Nodes are appended in execution order, so the
/// record is topological by construction.
pub struct Tape {
    nodes: Vec<Node>,
    /// False after a leaf was overwritten without a replay.
    fresh: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), fresh: true }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push_unchecked(Op::Leaf, value)
    }

    pub fn param(&mut self, name: &str, value: Tensor) -> Result<NodeId, NumericsError> {
        if self.nodes.iter().any(|n| matches!(&n.op, Op::Param(p) if p == name)) {
            return Err(NumericsError::DuplicateParam(name.to_string()));
        }
        Ok(self.push_unchecked(Op::Param(name.to_string()), value))
    }

    /// Overwrite a leaf value in place (same shape). Marks the record stale
    /// until the next `replay`.
    pub fn set_leaf(&mut self, id: NodeId, value: Tensor) -> Result<(), NumericsError> {
        let node = &mut self.nodes[id.0];
        if !matches!(node.op, Op::Leaf | Op::Param(_)) {
            return Err(NumericsError::NotALeaf(id.0));
        }
        if node.value.shape() != value.shape() {
            return Err(NumericsError::ShapeMismatch {
                op: "set-leaf",
                index: id.0,
                lhs: node.value.shape(),
                rhs: value.shape(),
            });
        }
        node.value = value;
        self.fresh = false;
        Ok(())
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Named parameters in record order.
    pub fn params(&self) -> Vec<(String, NodeId)> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match &n.op {
                Op::Param(name) => Some((name.clone(), NodeId(i))),
                _ => None,
            })
            .collect()
    }

    /// Value of the terminal (last recorded) node.
    pub fn terminal(&self) -> Option<&Tensor> {
        self.nodes.last().map(|n| &n.value)
    }

    fn push(&mut self, op: Op) -> Result<NodeId, NumericsError> {
        let index = self.nodes.len();
        let value = self.eval(&op, index)?;
        Ok(self.push_value(op, value, index))
    }

    fn push_unchecked(&mut self, op: Op, value: Tensor) -> NodeId {
        let index = self.nodes.len();
        self.push_value(op, value, index)
    }

    fn push_value(&mut self, op: Op, value: Tensor, index: usize) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(index)
    }

    // ── Primitive ops ───────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        self.push(Op::Matmul(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        self.push(Op::Add(a, b))
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        self.push(Op::Hadamard(a, b))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId, NumericsError> {
        self.push(Op::Scale(a, factor))
    }

    pub fn row_gather(&mut self, a: NodeId, idx: Rc<Vec<usize>>) -> Result<NodeId, NumericsError> {
        self.push(Op::RowGather(a, idx))
    }

    pub fn row_scatter_add(
        &mut self,
        a: NodeId,
        dst: Rc<Vec<usize>>,
        out_rows: usize,
    ) -> Result<NodeId, NumericsError> {
        self.push(Op::RowScatterAdd(a, dst, out_rows))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        self.push(Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        self.push(Op::Tanh(a))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        self.push(Op::Relu(a))
    }

    pub fn softplus(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        self.push(Op::Softplus(a))
    }

    pub fn softmax_row(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        self.push(Op::SoftmaxRow(a))
    }

    pub fn segment_softmax(
        &mut self,
        a: NodeId,
        offsets: Rc<Vec<usize>>,
    ) -> Result<NodeId, NumericsError> {
        self.push(Op::SegmentSoftmax(a, offsets))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        self.push(Op::ConcatCols(a, b))
    }

    pub fn reduce_sum(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        self.push(Op::ReduceSum(a))
    }

    /// Identity in the forward pass; the backward pass stops here.
    pub fn detach(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        self.push(Op::Detach(a))
    }

    // ── Forward / backward ──────────────────────────────────────────

    /// Recompute every non-leaf node in record order and return the terminal
    /// value. Needed after `set_leaf`; a freshly built record is already
    /// evaluated.
    pub fn replay(&mut self) -> Result<&Tensor, NumericsError> {
        for i in 0..self.nodes.len() {
            let op = self.nodes[i].op.clone();
            if matches!(op, Op::Leaf | Op::Param(_)) {
                continue;
            }
            let value = self.eval(&op, i)?;
            self.nodes[i].value = value;
        }
        self.fresh = true;
        self.terminal().ok_or(NumericsError::EmptyRecord)
    }

    /// Reverse pass seeded at the terminal node. `seed` must match the
    /// terminal shape; pass `None` for a scalar terminal (seed 1).
    pub fn backward(&self, seed: Option<&Tensor>) -> Result<Gradients, NumericsError> {
        if !self.fresh {
            return Err(NumericsError::BackwardBeforeForward);
        }
        let terminal = self.nodes.last().ok_or(NumericsError::EmptyRecord)?;
        let seed = match seed {
            Some(s) => {
                if s.shape() != terminal.value.shape() {
                    return Err(NumericsError::SeedShape {
                        seed: s.shape(),
                        terminal: terminal.value.shape(),
                    });
                }
                s.clone()
            }
            None => {
                if terminal.value.shape() != (1, 1) {
                    return Err(NumericsError::SeedShape {
                        seed: (1, 1),
                        terminal: terminal.value.shape(),
                    });
                }
                Tensor::scalar(1.0)
            }
        };

        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[self.nodes.len() - 1] = Some(seed);

        for i in (0..self.nodes.len()).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        let mut by_name = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(name) = &node.op {
                let g = grads[i]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(node.value.rows(), node.value.cols()));
                by_name.insert(name.clone(), g);
            }
        }
        Ok(Gradients { by_name })
    }

    // ── Kernels ─────────────────────────────────────────────────────

    fn binary_shapes(
        &self,
        op: &'static str,
        index: usize,
        a: NodeId,
        b: NodeId,
    ) -> Result<((usize, usize), (usize, usize)), NumericsError> {
        let la = self.nodes[a.0].value.shape();
        let lb = self.nodes[b.0].value.shape();
        let _ = (op, index);
        Ok((la, lb))
    }

    fn eval(&self, op: &Op, index: usize) -> Result<Tensor, NumericsError> {
        let out = match op {
            Op::Leaf | Op::Param(_) => unreachable!("leaves are never re-evaluated here"),
            Op::Matmul(a, b) => {
                let (sa, sb) = self.binary_shapes("matmul", index, *a, *b)?;
                if sa.1 != sb.0 {
                    return Err(NumericsError::ShapeMismatch {
                        op: "matmul",
                        index,
                        lhs: sa,
                        rhs: sb,
                    });
                }
                matmul(&self.nodes[a.0].value, &self.nodes[b.0].value)
            }
            Op::Add(a, b) => {
                let (sa, sb) = self.binary_shapes("add", index, *a, *b)?;
                let broadcast = sb == (1, sa.1) && sa.0 >= 1;
                if sa != sb && !broadcast {
                    return Err(NumericsError::ShapeMismatch { op: "add", index, lhs: sa, rhs: sb });
                }
                let va = &self.nodes[a.0].value;
                let vb = &self.nodes[b.0].value;
                let mut out = va.clone();
                if broadcast && sa != sb {
                    let brow = vb.data();
                    for r in 0..sa.0 {
                        let row = &mut out.data_mut()[r * sa.1..(r + 1) * sa.1];
                        for (o, &x) in row.iter_mut().zip(brow) {
                            *o += x;
                        }
                    }
                } else {
                    for (o, &x) in out.data_mut().iter_mut().zip(vb.data()) {
                        *o += x;
                    }
                }
                out
            }
            Op::Hadamard(a, b) => {
                let (sa, sb) = self.binary_shapes("hadamard", index, *a, *b)?;
                if sa != sb {
                    return Err(NumericsError::ShapeMismatch {
                        op: "hadamard",
                        index,
                        lhs: sa,
                        rhs: sb,
                    });
                }
                let mut out = self.nodes[a.0].value.clone();
                for (o, &x) in out.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
                    *o *= x;
                }
                out
            }
            Op::Scale(a, factor) => {
                let mut out = self.nodes[a.0].value.clone();
                for o in out.data_mut() {
                    *o *= factor;
                }
                out
            }
            Op::RowGather(a, idx) => {
                let v = &self.nodes[a.0].value;
                if let Some(&bad) = idx.iter().find(|&&r| r >= v.rows()) {
                    return Err(NumericsError::InvalidArg {
                        op: "row-gather",
                        index,
                        msg: format!("row index {bad} out of range for {} rows", v.rows()),
                    });
                }
                let c = v.cols();
                let mut out = Tensor::zeros(idx.len(), c);
                for (k, &r) in idx.iter().enumerate() {
                    out.data_mut()[k * c..(k + 1) * c].copy_from_slice(v.row(r));
                }
                out
            }
            Op::RowScatterAdd(a, dst, out_rows) => {
                let v = &self.nodes[a.0].value;
                if dst.len() != v.rows() {
                    return Err(NumericsError::InvalidArg {
                        op: "row-scatter-add",
                        index,
                        msg: format!("{} destinations for {} rows", dst.len(), v.rows()),
                    });
                }
                if let Some(&bad) = dst.iter().find(|&&r| r >= *out_rows) {
                    return Err(NumericsError::InvalidArg {
                        op: "row-scatter-add",
                        index,
                        msg: format!("destination {bad} out of range for {out_rows} rows"),
                    });
                }
                let c = v.cols();
                let mut out = Tensor::zeros(*out_rows, c);
                for (k, &r) in dst.iter().enumerate() {
                    let src = v.row(k);
                    let row = &mut out.data_mut()[r * c..(r + 1) * c];
                    for (o, &x) in row.iter_mut().zip(src) {
                        *o += x;
                    }
                }
                out
            }
            Op::Sigmoid(a) => self.map_unary(*a, math::sigmoid),
            Op::Tanh(a) => self.map_unary(*a, f64::tanh),
            Op::Relu(a) => self.map_unary(*a, |x| if x > 0.0 { x } else { 0.0 }),
            Op::Softplus(a) => self.map_unary(*a, math::softplus),
            Op::SoftmaxRow(a) => {
                let v = &self.nodes[a.0].value;
                if v.cols() == 0 {
                    return Err(NumericsError::InvalidArg {
                        op: "softmax-row",
                        index,
                        msg: "zero-width rows".into(),
                    });
                }
                let mut out = Tensor::zeros(v.rows(), v.cols());
                let c = v.cols();
                for r in 0..v.rows() {
                    let (lo, hi) = (r * c, (r + 1) * c);
                    math::softmax_into(&v.data()[lo..hi], &mut out.data_mut()[lo..hi]);
                }
                out
            }
            Op::SegmentSoftmax(a, offsets) => {
                let v = &self.nodes[a.0].value;
                if v.cols() != 1 {
                    return Err(NumericsError::InvalidArg {
                        op: "segment-softmax",
                        index,
                        msg: format!("expected a column, got {:?}", v.shape()),
                    });
                }
                validate_offsets(offsets, v.rows(), index)?;
                let mut out = Tensor::zeros(v.rows(), 1);
                for w in offsets.windows(2) {
                    let (lo, hi) = (w[0], w[1]);
                    if lo < hi {
                        math::softmax_into(&v.data()[lo..hi], &mut out.data_mut()[lo..hi]);
                    }
                }
                out
            }
            Op::ConcatCols(a, b) => {
                let (sa, sb) = self.binary_shapes("concat-cols", index, *a, *b)?;
                if sa.0 != sb.0 {
                    return Err(NumericsError::ShapeMismatch {
                        op: "concat-cols",
                        index,
                        lhs: sa,
                        rhs: sb,
                    });
                }
                let va = &self.nodes[a.0].value;
                let vb = &self.nodes[b.0].value;
                let c = sa.1 + sb.1;
                let mut out = Tensor::zeros(sa.0, c);
                for r in 0..sa.0 {
                    out.data_mut()[r * c..r * c + sa.1].copy_from_slice(va.row(r));
                    out.data_mut()[r * c + sa.1..(r + 1) * c].copy_from_slice(vb.row(r));
                }
                out
            }
            Op::ReduceSum(a) => Tensor::scalar(self.nodes[a.0].value.data().iter().sum()),
            Op::Detach(a) => self.nodes[a.0].value.clone(),
        };
        if !out.all_finite() {
            return Err(NumericsError::NonFinite { op: op.name(), index });
        }
        Ok(out)
    }

    fn map_unary(&self, a: NodeId, f: impl Fn(f64) -> f64) -> Tensor {
        let mut out = self.nodes[a.0].value.clone();
        for o in out.data_mut() {
            *o = f(*o);
        }
        out
    }

    /// Push this node's output gradient `g` back into its inputs.
    fn accumulate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &self.nodes[i].op {
            Op::Leaf | Op::Param(_) => {}
            Op::Matmul(a, b) => {
                let va = &self.nodes[a.0].value;
                let vb = &self.nodes[b.0].value;
                add_into(grads, a.0, va.shape(), |da| matmul_bt_into(g, vb, da));
                add_into(grads, b.0, vb.shape(), |db| matmul_at_into(va, g, db));
            }
            Op::Add(a, b) => {
                let sa = self.nodes[a.0].value.shape();
                let sb = self.nodes[b.0].value.shape();
                add_into(grads, a.0, sa, |da| {
                    for (o, &x) in da.data_mut().iter_mut().zip(g.data()) {
                        *o += x;
                    }
                });
                if sb == sa {
                    add_into(grads, b.0, sb, |db| {
                        for (o, &x) in db.data_mut().iter_mut().zip(g.data()) {
                            *o += x;
                        }
                    });
                } else {
                    // Broadcast bias: column-sum the output gradient.
                    add_into(grads, b.0, sb, |db| {
                        let c = sb.1;
                        for r in 0..g.rows() {
                            let row = g.row(r);
                            for (o, &x) in db.data_mut()[..c].iter_mut().zip(row) {
                                *o += x;
                            }
                        }
                    });
                }
            }
            Op::Hadamard(a, b) => {
                let va = self.nodes[a.0].value.clone();
                let vb = self.nodes[b.0].value.clone();
                add_into(grads, a.0, va.shape(), |da| {
                    for ((o, &x), &y) in da.data_mut().iter_mut().zip(g.data()).zip(vb.data()) {
                        *o += x * y;
                    }
                });
                add_into(grads, b.0, vb.shape(), |db| {
                    for ((o, &x), &y) in db.data_mut().iter_mut().zip(g.data()).zip(va.data()) {
                        *o += x * y;
                    }
                });
            }
            Op::Scale(a, factor) => {
                let sa = self.nodes[a.0].value.shape();
                add_into(grads, a.0, sa, |da| {
                    for (o, &x) in da.data_mut().iter_mut().zip(g.data()) {
                        *o += factor * x;
                    }
                });
            }
            Op::RowGather(a, idx) => {
                let sa = self.nodes[a.0].value.shape();
                let c = sa.1;
                add_into(grads, a.0, sa, |da| {
                    for (k, &r) in idx.iter().enumerate() {
                        let src = g.row(k);
                        let row = &mut da.data_mut()[r * c..(r + 1) * c];
                        for (o, &x) in row.iter_mut().zip(src) {
                            *o += x;
                        }
                    }
                });
            }
            Op::RowScatterAdd(a, dst, _) => {
                let sa = self.nodes[a.0].value.shape();
                let c = sa.1;
                add_into(grads, a.0, sa, |da| {
                    for (k, &r) in dst.iter().enumerate() {
                        let src = g.row(r);
                        let row = &mut da.data_mut()[k * c..(k + 1) * c];
                        for (o, &x) in row.iter_mut().zip(src) {
                            *o += x;
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[i].value;
                self.unary_grad(*a, grads, |k| g.data()[k] * y.data()[k] * (1.0 - y.data()[k]));
            }
            Op::Tanh(a) => {
                let y = &self.nodes[i].value;
                self.unary_grad(*a, grads, |k| g.data()[k] * (1.0 - y.data()[k] * y.data()[k]));
            }
            Op::Relu(a) => {
                let x = &self.nodes[a.0].value;
                // Subgradient at 0 is 0.
                self.unary_grad(*a, grads, |k| if x.data()[k] > 0.0 { g.data()[k] } else { 0.0 });
            }
            Op::Softplus(a) => {
                let x = &self.nodes[a.0].value;
                self.unary_grad(*a, grads, |k| g.data()[k] * math::sigmoid(x.data()[k]));
            }
            Op::SoftmaxRow(a) => {
                let y = &self.nodes[i].value;
                let sa = self.nodes[a.0].value.shape();
                let c = sa.1;
                add_into(grads, a.0, sa, |da| {
                    for r in 0..sa.0 {
                        softmax_segment_grad(
                            &y.data()[r * c..(r + 1) * c],
                            &g.data()[r * c..(r + 1) * c],
                            &mut da.data_mut()[r * c..(r + 1) * c],
                        );
                    }
                });
            }
            Op::SegmentSoftmax(a, offsets) => {
                let y = &self.nodes[i].value;
                let sa = self.nodes[a.0].value.shape();
                add_into(grads, a.0, sa, |da| {
                    for w in offsets.windows(2) {
                        let (lo, hi) = (w[0], w[1]);
                        if lo < hi {
                            softmax_segment_grad(
                                &y.data()[lo..hi],
                                &g.data()[lo..hi],
                                &mut da.data_mut()[lo..hi],
                            );
                        }
                    }
                });
            }
            Op::ConcatCols(a, b) => {
                let sa = self.nodes[a.0].value.shape();
                let sb = self.nodes[b.0].value.shape();
                let c = sa.1 + sb.1;
                add_into(grads, a.0, sa, |da| {
                    for r in 0..sa.0 {
                        let src = &g.data()[r * c..r * c + sa.1];
                        let row = &mut da.data_mut()[r * sa.1..(r + 1) * sa.1];
                        for (o, &x) in row.iter_mut().zip(src) {
                            *o += x;
                        }
                    }
                });
                add_into(grads, b.0, sb, |db| {
                    for r in 0..sb.0 {
                        let src = &g.data()[r * c + sa.1..(r + 1) * c];
                        let row = &mut db.data_mut()[r * sb.1..(r + 1) * sb.1];
                        for (o, &x) in row.iter_mut().zip(src) {
                            *o += x;
                        }
                    }
                });
            }
            Op::ReduceSum(a) => {
                let sa = self.nodes[a.0].value.shape();
                let s = g.data()[0];
                add_into(grads, a.0, sa, |da| {
                    for o in da.data_mut() {
                        *o += s;
                    }
                });
            }
            Op::Detach(_) => {}
        }
    }

    fn unary_grad(&self, a: NodeId, grads: &mut [Option<Tensor>], f: impl Fn(usize) -> f64) {
        let sa = self.nodes[a.0].value.shape();
        add_into(grads, a.0, sa, |da| {
            for k in 0..da.len() {
                da.data_mut()[k] += f(k);
            }
        });
    }
}

fn add_into(
    grads: &mut [Option<Tensor>],
    idx: usize,
    shape: (usize, usize),
    f: impl FnOnce(&mut Tensor),
) {
    let slot = grads[idx].get_or_insert_with(|| Tensor::zeros(shape.0, shape.1));
    f(slot);
}

fn validate_offsets(offsets: &[usize], n: usize, index: usize) -> Result<(), NumericsError> {
    let ok = offsets.first() == Some(&0)
        && offsets.last() == Some(&n)
        && offsets.windows(2).all(|w| w[0] <= w[1]);
    if ok {
        Ok(())
    } else {
        Err(NumericsError::InvalidArg {
            op: "segment-softmax",
            index,
            msg: format!("bad segment offsets for {n} rows"),
        })
    }
}

fn softmax_segment_grad(y: &[f64], g: &[f64], out: &mut [f64]) {
    let dot: f64 = y.iter().zip(g).map(|(&p, &q)| p * q).sum();
    for ((o, &p), &q) in out.iter_mut().zip(y).zip(g) {
        *o += p * (q - dot);
    }
}

/// C = A·B with the inner loop over contiguous rows of B.
pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let m = a.rows();
    let n = b.cols();
    let mut out = Tensor::zeros(m, n);
    for i in 0..m {
        let arow = a.row(i);
        let orow = &mut out.data_mut()[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                let brow = &b.data()[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
    out
}

/// out += A·Bᵀ, used for dA = dC·Bᵀ.
fn matmul_bt_into(a: &Tensor, b: &Tensor, out: &mut Tensor) {
    let m = a.rows();
    let k = b.rows();
    for i in 0..m {
        let arow = a.row(i);
        let orow = &mut out.data_mut()[i * k..(i + 1) * k];
        for (p, o) in orow.iter_mut().enumerate() {
            let brow = b.row(p);
            let mut s = 0.0;
            for (&x, &y) in arow.iter().zip(brow) {
                s += x * y;
            }
            *o += s;
        }
    }
}

/// out += Aᵀ·B, used for dB = Aᵀ·dC.
fn matmul_at_into(a: &Tensor, b: &Tensor, out: &mut Tensor) {
    let m = a.rows();
    let n = b.cols();
    for i in 0..m {
        let arow = a.row(i);
        let brow = b.row(i);
        for (p, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                let orow = &mut out.data_mut()[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
}
