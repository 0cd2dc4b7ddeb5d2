use std::collections::HashMap;

use super::tensor::{matmul_acc, matmul_at_acc, matmul_bt_acc};
use super::{DiffError, Gradients, ParamStore, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(usize),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    Log(NodeId),
    LogSigmoid(NodeId),
    Relu(NodeId),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    ConcatCols(Vec<NodeId>),
    StackRows(Vec<NodeId>),
    Sum(NodeId),
    Mean(NodeId),
    RowSum(NodeId),
    SliceCols { src: NodeId, start: usize },
    GatherRows(NodeId, Vec<usize>),
    Pick(NodeId, Vec<usize>),
    Gru(Box<GruRecord>),
}

/// Saved activations of a fused GRU scan, needed for backpropagation through time.
#[derive(Debug)]
struct GruRecord {
    xproj: NodeId,
    u: NodeId,
    bh: NodeId,
    hidden: usize,
    /// Per step: previous hidden state, reset gate, update gate, candidate, and
    /// the hidden-side candidate pre-activation `h_prev·U_n + b_n`.
    h_prev: Vec<f64>,
    r: Vec<f64>,
    z: Vec<f64>,
    n: Vec<f64>,
    hn: Vec<f64>,
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Define-by-run reverse-mode tape. Each recording call evaluates its op
/// immediately, so node order is a topological order of the graph.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<usize, NodeId>,
}

fn broadcast_index(rr: usize, rc: usize, i: usize, j: usize) -> usize {
    (if rr == 1 { 0 } else { i }) * rc + if rc == 1 { 0 } else { j }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sigmoid(x: f64) -> f64 {
    // -softplus(-x), stable for large |x|
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    fn shape_err(&self, op: &'static str, expected: (usize, usize), actual: (usize, usize)) -> DiffError {
        DiffError::ShapeMismatch { op_index: self.nodes.len(), op, expected, actual }
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    /// Records a parameter read. Repeated reads of the same id share one node.
    pub fn param(&mut self, store: &ParamStore, id: &str) -> Result<NodeId, DiffError> {
        let idx = store.index_of(id)?;
        if let Some(&n) = self.params.get(&idx) {
            return Ok(n);
        }
        let node = self.push(Op::Param(idx), store.by_index(idx).to_tensor());
        self.params.insert(idx, node);
        Ok(node)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let (ar, ac) = self.value(a).shape();
        let (br, bc) = self.value(b).shape();
        if ac != br {
            return Err(self.shape_err("matmul", (ac, bc), (br, bc)));
        }
        let mut out = Tensor::zeros(ar, bc);
        matmul_acc(self.value(a).data(), self.value(b).data(), out.data_mut(), ar, ac, bc);
        Ok(self.push(Op::MatMul(a, b), out))
    }

    fn check_broadcast(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<(), DiffError> {
        let (ar, ac) = self.value(a).shape();
        let (br, bc) = self.value(b).shape();
        let rows_ok = br == ar || br == 1;
        let cols_ok = bc == ac || bc == 1;
        if rows_ok && cols_ok {
            Ok(())
        } else {
            Err(self.shape_err(op, (ar, ac), (br, bc)))
        }
    }

    fn binary(&mut self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let av = self.value(a);
        let bv = self.value(b);
        let (ar, ac) = av.shape();
        let (br, bc) = bv.shape();
        let mut out = Tensor::zeros(ar, ac);
        let od = out.data_mut();
        let (ad, bd) = (av.data(), bv.data());
        if (br, bc) == (ar, ac) {
            for k in 0..od.len() {
                od[k] = f(ad[k], bd[k]);
            }
        } else {
            for i in 0..ar {
                for j in 0..ac {
                    od[i * ac + j] = f(ad[i * ac + j], bd[broadcast_index(br, bc, i, j)]);
                }
            }
        }
        out
    }

    /// Elementwise `a + b`; `b` may broadcast as a row, a column or a scalar.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.check_broadcast("add", a, b)?;
        let out = self.binary(a, b, |x, y| x + y);
        Ok(self.push(Op::Add(a, b), out))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.check_broadcast("sub", a, b)?;
        let out = self.binary(a, b, |x, y| x - y);
        Ok(self.push(Op::Sub(a, b), out))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.check_broadcast("mul", a, b)?;
        let out = self.binary(a, b, |x, y| x * y);
        Ok(self.push(Op::Mul(a, b), out))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let out = self.value(a).map(|x| x * c);
        self.push(Op::Scale(a, c), out)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(sigmoid);
        self.push(Op::Sigmoid(a), out)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a), out)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(f64::exp);
        self.push(Op::Exp(a), out)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(f64::ln);
        self.push(Op::Log(a), out)
    }

    /// `log(sigmoid(a))` evaluated without overflow.
    pub fn log_sigmoid(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(log_sigmoid);
        self.push(Op::LogSigmoid(a), out)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(Op::Relu(a), out)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let mut out = self.value(a).clone();
        let cols = out.cols();
        for row in out.data_mut().chunks_mut(cols.max(1)) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                s += *x;
            }
            for x in row.iter_mut() {
                *x /= s;
            }
        }
        self.push(Op::Softmax(a), out)
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: NodeId) -> NodeId {
        let mut out = self.value(a).clone();
        let cols = out.cols();
        for row in out.data_mut().chunks_mut(cols.max(1)) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        self.push(Op::LogSoftmax(a), out)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, DiffError> {
        let rows = parts.first().map_or(0, |&p| self.value(p).rows());
        let mut cols = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rows() != rows {
                return Err(self.shape_err("concat_cols", (rows, v.cols()), v.shape()));
            }
            cols += v.cols();
        }
        let mut out = Tensor::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let v = &self.nodes[p.0].value;
            for i in 0..rows {
                let dst = &mut out.data_mut()[i * cols + offset..i * cols + offset + v.cols()];
                dst.copy_from_slice(v.row_slice(i));
            }
            offset += v.cols();
        }
        Ok(self.push(Op::ConcatCols(parts.to_vec()), out))
    }

    pub fn stack_rows(&mut self, parts: &[NodeId]) -> Result<NodeId, DiffError> {
        let cols = parts.first().map_or(0, |&p| self.value(p).cols());
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != cols {
                return Err(self.shape_err("stack_rows", (v.rows(), cols), v.shape()));
            }
            data.extend_from_slice(v.data());
            rows += v.rows();
        }
        Ok(self.push(Op::StackRows(parts.to_vec()), Tensor::new(rows, cols, data)))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data().iter().sum();
        self.push(Op::Sum(a), Tensor::scalar(s))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.len().max(1) as f64;
        self.push(Op::Mean(a), Tensor::scalar(s))
    }

    /// Sums each row, producing an `r x 1` column.
    pub fn row_sum(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let sums: Vec<f64> = (0..v.rows()).map(|i| v.row_slice(i).iter().sum()).collect();
        self.push(Op::RowSum(a), Tensor::column(&sums))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId, DiffError> {
        let v = self.value(a);
        if start + len > v.cols() {
            return Err(self.shape_err("slice_cols", (v.rows(), start + len), v.shape()));
        }
        let mut data = Vec::with_capacity(v.rows() * len);
        for i in 0..v.rows() {
            data.extend_from_slice(&v.row_slice(i)[start..start + len]);
        }
        let out = Tensor::new(v.rows(), len, data);
        Ok(self.push(Op::SliceCols { src: a, start }, out))
    }

    /// Selects rows by index (embedding lookup, per-item fan-out).
    pub fn gather_rows(&mut self, a: NodeId, idx: &[usize]) -> Result<NodeId, DiffError> {
        let v = self.value(a);
        let mut data = Vec::with_capacity(idx.len() * v.cols());
        for &i in idx {
            if i >= v.rows() {
                return Err(self.shape_err("gather_rows", (i + 1, v.cols()), v.shape()));
            }
            data.extend_from_slice(v.row_slice(i));
        }
        let out = Tensor::new(idx.len(), v.cols(), data);
        Ok(self.push(Op::GatherRows(a, idx.to_vec()), out))
    }

    /// Picks one column per row, producing an `r x 1` column.
    pub fn pick(&mut self, a: NodeId, cols: &[usize]) -> Result<NodeId, DiffError> {
        let v = self.value(a);
        if cols.len() != v.rows() {
            return Err(self.shape_err("pick", (cols.len(), v.cols()), v.shape()));
        }
        let mut out = Vec::with_capacity(cols.len());
        for (i, &c) in cols.iter().enumerate() {
            if c >= v.cols() {
                return Err(self.shape_err("pick", (v.rows(), c + 1), v.shape()));
            }
            out.push(v.get(i, c));
        }
        Ok(self.push(Op::Pick(a, cols.to_vec()), Tensor::column(&out)))
    }

    /// Fused gated recurrent scan from a zero initial state.
    ///
    /// `xproj` is `T x 3H` (input projections for the reset, update and candidate
    /// gates, input bias included), `u` is `H x 3H`, `bh` is `1 x 3H`. Returns the
    /// final hidden state as `1 x H`.
    pub fn gru(&mut self, xproj: NodeId, u: NodeId, bh: NodeId) -> Result<NodeId, DiffError> {
        let (hr, hc) = self.value(u).shape();
        let h = hr;
        if hc != 3 * h {
            return Err(self.shape_err("gru", (h, 3 * h), (hr, hc)));
        }
        let (xr, xc) = self.value(xproj).shape();
        if xc != 3 * h || xr == 0 {
            return Err(self.shape_err("gru", (xr.max(1), 3 * h), (xr, xc)));
        }
        if self.value(bh).shape() != (1, 3 * h) {
            return Err(self.shape_err("gru", (1, 3 * h), self.value(bh).shape()));
        }
        let t_len = xr;
        let x = self.value(xproj).data();
        let ud = self.value(u).data();
        let bd = self.value(bh).data();
        let mut rec = GruRecord {
            xproj,
            u,
            bh,
            hidden: h,
            h_prev: Vec::with_capacity(t_len * h),
            r: Vec::with_capacity(t_len * h),
            z: Vec::with_capacity(t_len * h),
            n: Vec::with_capacity(t_len * h),
            hn: Vec::with_capacity(t_len * h),
        };
        let mut state = vec![0.0; h];
        let mut hp = vec![0.0; 3 * h];
        for t in 0..t_len {
            hp.copy_from_slice(bd);
            matmul_acc(&state, ud, &mut hp, 1, h, 3 * h);
            let xt = &x[t * 3 * h..(t + 1) * 3 * h];
            rec.h_prev.extend_from_slice(&state);
            for k in 0..h {
                let r = sigmoid(xt[k] + hp[k]);
                let z = sigmoid(xt[h + k] + hp[h + k]);
                let hn = hp[2 * h + k];
                let n = (xt[2 * h + k] + r * hn).tanh();
                rec.r.push(r);
                rec.z.push(z);
                rec.n.push(n);
                rec.hn.push(hn);
                state[k] = (1.0 - z) * n + z * state[k];
            }
        }
        Ok(self.push(Op::Gru(Box::new(rec)), Tensor::row(&state)))
    }

    /// Backpropagates from a scalar output with seed adjoint 1.
    pub fn backward(&self, output: NodeId, store: &ParamStore) -> Result<Gradients, DiffError> {
        let seed = Tensor::scalar(1.0);
        self.backward_with_seed(output, seed, store)
    }

    pub fn backward_with_seed(
        &self,
        output: NodeId,
        seed: Tensor,
        store: &ParamStore,
    ) -> Result<Gradients, DiffError> {
        let adjoints = self.adjoints(output, seed)?;
        let mut grads = Gradients::zeros_like(store);
        for (node, adj) in self.nodes.iter().zip(&adjoints) {
            if let (Op::Param(idx), Some(adj)) = (&node.op, adj) {
                for (g, a) in grads.get_mut(*idx).iter_mut().zip(adj.data()) {
                    *g += a;
                }
            }
        }
        Ok(grads)
    }

    /// Adjoints of every node with respect to `output` under the given seed.
    /// Nodes that do not reach the output keep a `None` (zero) adjoint.
    pub fn adjoints(&self, output: NodeId, seed: Tensor) -> Result<Vec<Option<Tensor>>, DiffError> {
        if output.0 >= self.nodes.len() {
            return Err(DiffError::BackwardBeforeForward);
        }
        let out_shape = self.nodes[output.0].value.shape();
        if seed.shape() != out_shape {
            return Err(DiffError::ShapeMismatch {
                op_index: output.0,
                op: "backward seed",
                expected: out_shape,
                actual: seed.shape(),
            });
        }
        let mut adj: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[output.0] = Some(seed);
        for i in (0..=output.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            self.backprop_node(i, &g, &mut adj);
            adj[i] = Some(g);
        }
        Ok(adj)
    }

    fn backprop_node(&self, i: usize, g: &Tensor, adj: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let nodes = &self.nodes;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                let (m, k) = av.shape();
                let n = bv.cols();
                matmul_bt_acc(g.data(), bv.data(), slot(adj, nodes, *a).data_mut(), m, n, k);
                matmul_at_acc(av.data(), g.data(), slot(adj, nodes, *b).data_mut(), m, k, n);
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                slot(adj, nodes, *a).add_assign(g);
                let (br, bc) = nodes[b.0].value.shape();
                let gb = slot(adj, nodes, *b);
                let (gr, gc) = g.shape();
                for r in 0..gr {
                    for c in 0..gc {
                        gb.data_mut()[broadcast_index(br, bc, r, c)] += sign * g.get(r, c);
                    }
                }
            }
            Op::Mul(a, b) => {
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                let (br, bc) = bv.shape();
                let (gr, gc) = g.shape();
                {
                    let ga = slot(adj, nodes, *a);
                    for r in 0..gr {
                        for c in 0..gc {
                            ga.data_mut()[r * gc + c] += g.get(r, c) * bv.data()[broadcast_index(br, bc, r, c)];
                        }
                    }
                }
                let gb = slot(adj, nodes, *b);
                for r in 0..gr {
                    for c in 0..gc {
                        gb.data_mut()[broadcast_index(br, bc, r, c)] += g.get(r, c) * av.get(r, c);
                    }
                }
            }
            Op::Scale(a, c) => {
                for (x, gv) in slot(adj, nodes, *a).data_mut().iter_mut().zip(g.data()) {
                    *x += c * gv;
                }
            }
            Op::Sigmoid(a) => zip3(slot(adj, nodes, *a), g, y, |gv, yv, _| gv * yv * (1.0 - yv), &nodes[a.0].value),
            Op::Tanh(a) => zip3(slot(adj, nodes, *a), g, y, |gv, yv, _| gv * (1.0 - yv * yv), &nodes[a.0].value),
            Op::Exp(a) => zip3(slot(adj, nodes, *a), g, y, |gv, yv, _| gv * yv, &nodes[a.0].value),
            Op::Log(a) => zip3(slot(adj, nodes, *a), g, y, |gv, _, xv| gv / xv, &nodes[a.0].value),
            Op::LogSigmoid(a) => zip3(slot(adj, nodes, *a), g, y, |gv, _, xv| gv * sigmoid(-xv), &nodes[a.0].value),
            Op::Relu(a) => {
                zip3(slot(adj, nodes, *a), g, y, |gv, _, xv| if xv > 0.0 { gv } else { 0.0 }, &nodes[a.0].value)
            }
            Op::Softmax(a) => {
                let ga = slot(adj, nodes, *a);
                let cols = y.cols();
                for r in 0..y.rows() {
                    let yr = y.row_slice(r);
                    let gr = g.row_slice(r);
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for c in 0..cols {
                        ga.data_mut()[r * cols + c] += yr[c] * (gr[c] - dot);
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let ga = slot(adj, nodes, *a);
                let cols = y.cols();
                for r in 0..y.rows() {
                    let yr = y.row_slice(r);
                    let gr = g.row_slice(r);
                    let gs: f64 = gr.iter().sum();
                    for c in 0..cols {
                        ga.data_mut()[r * cols + c] += gr[c] - yr[c].exp() * gs;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let cols = y.cols();
                let mut offset = 0;
                for p in parts {
                    let pc = nodes[p.0].value.cols();
                    let gp = slot(adj, nodes, *p);
                    for r in 0..y.rows() {
                        for c in 0..pc {
                            gp.data_mut()[r * pc + c] += g.data()[r * cols + offset + c];
                        }
                    }
                    offset += pc;
                }
            }
            Op::StackRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = nodes[p.0].value.len();
                    for (x, gv) in slot(adj, nodes, *p).data_mut().iter_mut().zip(&g.data()[offset..offset + n]) {
                        *x += gv;
                    }
                    offset += n;
                }
            }
            Op::Sum(a) => {
                let gv = g.item();
                for x in slot(adj, nodes, *a).data_mut() {
                    *x += gv;
                }
            }
            Op::Mean(a) => {
                let n = nodes[a.0].value.len().max(1) as f64;
                let gv = g.item() / n;
                for x in slot(adj, nodes, *a).data_mut() {
                    *x += gv;
                }
            }
            Op::RowSum(a) => {
                let ga = slot(adj, nodes, *a);
                let cols = ga.cols();
                for r in 0..ga.rows() {
                    let gv = g.data()[r];
                    for x in &mut ga.data_mut()[r * cols..(r + 1) * cols] {
                        *x += gv;
                    }
                }
            }
            Op::SliceCols { src, start } => {
                let ga = slot(adj, nodes, *src);
                let cols = ga.cols();
                let len = g.cols();
                for r in 0..g.rows() {
                    for c in 0..len {
                        ga.data_mut()[r * cols + start + c] += g.get(r, c);
                    }
                }
            }
            Op::GatherRows(a, idx) => {
                let ga = slot(adj, nodes, *a);
                let cols = ga.cols();
                for (k, &row) in idx.iter().enumerate() {
                    for c in 0..cols {
                        ga.data_mut()[row * cols + c] += g.data()[k * cols + c];
                    }
                }
            }
            Op::Pick(a, cols) => {
                let ga = slot(adj, nodes, *a);
                let width = ga.cols();
                for (r, &c) in cols.iter().enumerate() {
                    ga.data_mut()[r * width + c] += g.data()[r];
                }
            }
            Op::Gru(rec) => self.backprop_gru(rec, g, adj),
        }
    }

    fn backprop_gru(&self, rec: &GruRecord, g: &Tensor, adj: &mut [Option<Tensor>]) {
        let h = rec.hidden;
        let t_len = rec.r.len() / h;
        let ud = self.nodes[rec.u.0].value.data();
        let mut dx = Tensor::zeros(t_len, 3 * h);
        let mut du = vec![0.0; h * 3 * h];
        let mut db = vec![0.0; 3 * h];
        let mut dh: Vec<f64> = g.data().to_vec();
        let mut dhp = vec![0.0; 3 * h];
        let mut dprev = vec![0.0; h];
        for t in (0..t_len).rev() {
            let o = t * h;
            for k in 0..h {
                let (r, z, n, hn, hprev) = (rec.r[o + k], rec.z[o + k], rec.n[o + k], rec.hn[o + k], rec.h_prev[o + k]);
                let d = dh[k];
                let dn_pre = d * (1.0 - z) * (1.0 - n * n);
                let dz_pre = d * (hprev - n) * z * (1.0 - z);
                let dr_pre = dn_pre * hn * r * (1.0 - r);
                let row = &mut dx.data_mut()[t * 3 * h..(t + 1) * 3 * h];
                row[k] = dr_pre;
                row[h + k] = dz_pre;
                row[2 * h + k] = dn_pre;
                dhp[k] = dr_pre;
                dhp[h + k] = dz_pre;
                dhp[2 * h + k] = dn_pre * r;
                dprev[k] = d * z;
            }
            matmul_at_acc(&rec.h_prev[o..o + h], &dhp, &mut du, 1, h, 3 * h);
            for (b, v) in db.iter_mut().zip(&dhp) {
                *b += v;
            }
            matmul_bt_acc(&dhp, ud, &mut dprev, 1, 3 * h, h);
            std::mem::swap(&mut dh, &mut dprev);
        }
        let mut add_to = |id: NodeId, data: &[f64]| {
            let (r, c) = self.nodes[id.0].value.shape();
            let t = adj[id.0].get_or_insert_with(|| Tensor::zeros(r, c));
            for (x, v) in t.data_mut().iter_mut().zip(data) {
                *x += v;
            }
        };
        add_to(rec.xproj, dx.data());
        add_to(rec.u, &du);
        add_to(rec.bh, &db);
    }
}

fn slot<'a>(adj: &'a mut [Option<Tensor>], nodes: &[Node], id: NodeId) -> &'a mut Tensor {
    let (r, c) = nodes[id.0].value.shape();
    adj[id.0].get_or_insert_with(|| Tensor::zeros(r, c))
}

fn zip3(dst: &mut Tensor, g: &Tensor, y: &Tensor, f: impl Fn(f64, f64, f64) -> f64, x: &Tensor) {
    for (((d, &gv), &yv), &xv) in dst.data_mut().iter_mut().zip(g.data()).zip(y.data()).zip(x.data()) {
        *d += f(gv, yv, xv);
    }
}
