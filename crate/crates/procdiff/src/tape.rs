//! Reverse-mode automatic differentiation over [`Mat`] values.
//!
//! A [`Tape`] records each operation as it runs forward; [`Tape::backward`]
//! replays the record in reverse to accumulate exact gradients. Everything is
//! 64-bit, so analytic gradients can be held to central finite differences at
//! tight tolerances. The op set is only what the encoder, denoiser, and
//! losses need.

use std::sync::Arc;

use crate::mat::Mat;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    /// `(n, k) x (k, m)`
    MatMul(NodeId, NodeId),
    /// `(n, k) x (m, k)^T`
    MatMulNT(NodeId, NodeId),
    /// `(n, d) + (1, d)` broadcast over rows
    AddRow(NodeId, NodeId),
    Row(NodeId, usize),
    ConcatRows(Vec<NodeId>),
    Cols(NodeId, usize, usize),
    ConcatCols(Vec<NodeId>),
    Tanh(NodeId),
    Gelu(NodeId),
    SoftmaxRows(NodeId),
    LayerNormRows { x: NodeId, gain: NodeId, bias: NodeId, eps: f64 },
    /// Cosine of a `(1, d)` vector against every row of a fixed table.
    CosineToTable { x: NodeId, table: Arc<Mat> },
    /// Cross-entropy `H(target, softmax(scores))` with the log clamped below.
    CeFromScores { scores: NodeId, target: Vec<f64>, probs: Vec<f64>, live: Vec<bool> },
    SumSq(NodeId),
}

struct Node {
    op: Op,
    value: Arc<Mat>,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Mat> {
        self.grads[id.0].as_ref()
    }
}

/// Forward-recording tape.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Mat, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { op, value: Arc::new(value), needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// A differentiable leaf holding a parameter (shared, not copied).
    pub fn param(&mut self, value: Arc<Mat>) -> NodeId {
        self.nodes.push(Node { op: Op::Leaf, value, needs_grad: true });
        NodeId(self.nodes.len() - 1)
    }

    /// A non-differentiable leaf.
    pub fn constant(&mut self, value: Mat) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!((va.rows, va.cols), (vb.rows, vb.cols), "add shape mismatch");
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Add(a, b), out, ng)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!((va.rows, va.cols), (vb.rows, vb.cols), "sub shape mismatch");
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x - y).collect();
        let out = Mat::from_vec(va.rows, va.cols, data);
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Sub(a, b), out, ng)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!((va.rows, va.cols), (vb.rows, vb.cols), "mul shape mismatch");
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x * y).collect();
        let out = Mat::from_vec(va.rows, va.cols, data);
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Mul(a, b), out, ng)
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let va = self.value(a);
        let data = va.data.iter().map(|x| x * s).collect();
        let out = Mat::from_vec(va.rows, va.cols, data);
        let ng = self.needs(a);
        self.push(Op::Scale(a, s), out, ng)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = self.value(a).matmul(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::MatMul(a, b), out, ng)
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = self.value(a).matmul_nt(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::MatMulNT(a, b), out, ng)
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (va, vr) = (self.value(a), self.value(row));
        assert_eq!(vr.rows, 1, "add_row expects a (1, d) row");
        assert_eq!(va.cols, vr.cols, "add_row width mismatch");
        let mut out = self.value(a).clone();
        for r in 0..out.rows {
            let row_slice = out.row_mut(r);
            for (o, &b) in row_slice.iter_mut().zip(&self.value(row).data) {
                *o += b;
            }
        }
        let ng = self.needs(a) || self.needs(row);
        self.push(Op::AddRow(a, row), out, ng)
    }

    pub fn row(&mut self, a: NodeId, r: usize) -> NodeId {
        let va = self.value(a);
        assert!(r < va.rows, "row index out of range");
        let out = Mat::row_vec(va.row(r).to_vec());
        let ng = self.needs(a);
        self.push(Op::Row(a, r), out, ng)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols, cols, "concat_rows width mismatch");
            rows += v.rows;
            data.extend_from_slice(&v.data);
        }
        let out = Mat::from_vec(rows, cols, data);
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(Op::ConcatRows(parts.to_vec()), out, ng)
    }

    pub fn cols(&mut self, a: NodeId, c0: usize, c1: usize) -> NodeId {
        let va = self.value(a);
        assert!(c0 < c1 && c1 <= va.cols, "cols range out of bounds");
        let mut data = Vec::with_capacity(va.rows * (c1 - c0));
        for r in 0..va.rows {
            data.extend_from_slice(&va.row(r)[c0..c1]);
        }
        let out = Mat::from_vec(va.rows, c1 - c0, data);
        let ng = self.needs(a);
        self.push(Op::Cols(a, c0, c1), out, ng)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows;
        let total: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Mat::zeros(rows, total);
        let mut offset = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.rows, rows, "concat_cols height mismatch");
            for r in 0..rows {
                out.row_mut(r)[offset..offset + v.cols].copy_from_slice(v.row(r));
            }
            offset += v.cols;
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(Op::ConcatCols(parts.to_vec()), out, ng)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let data = va.data.iter().map(|x| x.tanh()).collect();
        let out = Mat::from_vec(va.rows, va.cols, data);
        let ng = self.needs(a);
        self.push(Op::Tanh(a), out, ng)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let data = va
            .data
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()))
            .collect();
        let out = Mat::from_vec(va.rows, va.cols, data);
        let ng = self.needs(a);
        self.push(Op::Gelu(a), out, ng)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let mut out = Mat::zeros(va.rows, va.cols);
        for r in 0..va.rows {
            let p = crate::math::softmax(va.row(r));
            out.row_mut(r).copy_from_slice(&p);
        }
        let ng = self.needs(a);
        self.push(Op::SoftmaxRows(a), out, ng)
    }

    pub fn layer_norm_rows(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> NodeId {
        let (vx, vg, vb) = (self.value(x), self.value(gain), self.value(bias));
        assert_eq!(vg.rows, 1);
        assert_eq!(vb.rows, 1);
        assert_eq!(vg.cols, vx.cols);
        assert_eq!(vb.cols, vx.cols);
        let d = vx.cols as f64;
        let mut out = Mat::zeros(vx.rows, vx.cols);
        for r in 0..vx.rows {
            let xr = vx.row(r);
            let mean = xr.iter().sum::<f64>() / d;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let inv = 1.0 / (var + eps).sqrt();
            for (c, o) in out.row_mut(r).iter_mut().enumerate() {
                *o = (xr[c] - mean) * inv * vg.data[c] + vb.data[c];
            }
        }
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        self.push(Op::LayerNormRows { x, gain, bias, eps }, out, ng)
    }

    /// Cosine of `x` (a `(1, d)` node) against every row of `table`.
    /// The table is a frozen constant; no gradient flows into it.
    pub fn cosine_to_table(&mut self, x: NodeId, table: Arc<Mat>) -> NodeId {
        let vx = self.value(x);
        assert_eq!(vx.rows, 1, "cosine_to_table expects a (1, d) vector");
        assert_eq!(vx.cols, table.cols, "cosine_to_table width mismatch");
        let nx = crate::mat::norm(&vx.data);
        assert!(nx > 0.0, "cosine_to_table: zero vector");
        let scores: Vec<f64> = (0..table.rows)
            .map(|k| {
                let yk = table.row(k);
                crate::mat::dot(&vx.data, yk) / (nx * crate::mat::norm(yk))
            })
            .collect();
        let out = Mat::row_vec(scores);
        let ng = self.needs(x);
        self.push(Op::CosineToTable { x, table }, out, ng)
    }

    /// Cross-entropy `H(target, softmax(scores))` in nats, with each
    /// `log p_k` clamped at `ln(LOG_CLAMP)`. Returns the scalar node and the
    /// number of clamped terms that carried target mass.
    pub fn ce_from_scores(&mut self, scores: NodeId, target: &[f64]) -> (NodeId, usize) {
        let vs = self.value(scores);
        assert_eq!(vs.rows, 1, "ce_from_scores expects (1, k) scores");
        assert_eq!(vs.cols, target.len(), "ce_from_scores target length mismatch");
        let clamp_ln = LOG_CLAMP.ln();
        let logp = crate::math::log_softmax(&vs.data);
        let probs = crate::math::softmax(&vs.data);
        let live: Vec<bool> = logp.iter().map(|&lp| lp > clamp_ln).collect();
        let mut clamped = 0usize;
        let mut loss = 0.0;
        for k in 0..target.len() {
            if target[k] == 0.0 {
                continue;
            }
            if live[k] {
                loss -= target[k] * logp[k];
            } else {
                loss -= target[k] * clamp_ln;
                clamped += 1;
            }
        }
        let ng = self.needs(scores);
        let id = self.push(
            Op::CeFromScores { scores, target: target.to_vec(), probs, live },
            Mat::from_vec(1, 1, vec![loss]),
            ng,
        );
        (id, clamped)
    }

    /// Sum of squared entries, a scalar node.
    pub fn sum_sq(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let s = va.data.iter().map(|x| x * x).sum();
        let ng = self.needs(a);
        self.push(Op::SumSq(a), Mat::from_vec(1, 1, vec![s]), ng)
    }

    /// Backpropagate from a scalar root node.
    pub fn backward(&self, root: NodeId) -> Gradients {
        let rv = self.value(root);
        assert_eq!((rv.rows, rv.cols), (1, 1), "backward root must be scalar");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Mat::from_vec(1, 1, vec![1.0]));

        for i in (0..=root.0).rev() {
            if grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let g = grads[i].take().unwrap();
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Mat>], id: NodeId, delta: Mat) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => g.add_assign(&delta),
            slot => *slot = Some(delta),
        }
    }

    fn backprop_node(&self, i: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                let mut neg = g.clone();
                neg.scale_assign(-1.0);
                self.accumulate(grads, *b, neg);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).clone(), self.value(*b).clone());
                let da = Mat::from_vec(
                    g.rows,
                    g.cols,
                    g.data.iter().zip(&vb.data).map(|(x, y)| x * y).collect(),
                );
                let db = Mat::from_vec(
                    g.rows,
                    g.cols,
                    g.data.iter().zip(&va.data).map(|(x, y)| x * y).collect(),
                );
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::Scale(a, s) => {
                let mut da = g.clone();
                da.scale_assign(*s);
                self.accumulate(grads, *a, da);
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a).clone(), self.value(*b).clone());
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.matmul_nt(&vb));
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, va.matmul_tn(g));
                }
            }
            Op::MatMulNT(a, b) => {
                let (va, vb) = (self.value(*a).clone(), self.value(*b).clone());
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.matmul(&vb));
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.matmul_tn(&va));
                }
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if self.needs(*row) {
                    let mut drow = Mat::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (o, &v) in drow.data.iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    self.accumulate(grads, *row, drow);
                }
            }
            Op::Row(a, r) => {
                let va = self.value(*a);
                let mut da = Mat::zeros(va.rows, va.cols);
                da.row_mut(*r).copy_from_slice(&g.data);
                self.accumulate(grads, *a, da);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let v = self.value(p);
                    if self.needs(p) {
                        let mut dp = Mat::zeros(v.rows, v.cols);
                        dp.data
                            .copy_from_slice(&g.data[offset * g.cols..(offset + v.rows) * g.cols]);
                        self.accumulate(grads, p, dp);
                    }
                    offset += v.rows;
                }
            }
            Op::Cols(a, c0, _c1) => {
                let va = self.value(*a);
                let mut da = Mat::zeros(va.rows, va.cols);
                for r in 0..g.rows {
                    da.row_mut(r)[*c0..*c0 + g.cols].copy_from_slice(g.row(r));
                }
                self.accumulate(grads, *a, da);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let v = self.value(p);
                    if self.needs(p) {
                        let mut dp = Mat::zeros(v.rows, v.cols);
                        for r in 0..v.rows {
                            dp.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + v.cols]);
                        }
                        self.accumulate(grads, p, dp);
                    }
                    offset += v.cols;
                }
            }
            Op::Tanh(a) => {
                let y = &self.nodes[i].value;
                let da = Mat::from_vec(
                    g.rows,
                    g.cols,
                    g.data.iter().zip(&y.data).map(|(gv, yv)| gv * (1.0 - yv * yv)).collect(),
                );
                self.accumulate(grads, *a, da);
            }
            Op::Gelu(a) => {
                let vx = self.value(*a);
                let da = Mat::from_vec(
                    g.rows,
                    g.cols,
                    g.data
                        .iter()
                        .zip(&vx.data)
                        .map(|(gv, &x)| {
                            let u = GELU_C * (x + GELU_A * x * x * x);
                            let t = u.tanh();
                            let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                            gv * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                        })
                        .collect(),
                );
                self.accumulate(grads, *a, da);
            }
            Op::SoftmaxRows(a) => {
                let p = &self.nodes[i].value;
                let mut da = Mat::zeros(g.rows, g.cols);
                for r in 0..g.rows {
                    let pr = p.row(r);
                    let gr = g.row(r);
                    let inner = crate::mat::dot(gr, pr);
                    for (c, o) in da.row_mut(r).iter_mut().enumerate() {
                        *o = pr[c] * (gr[c] - inner);
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::LayerNormRows { x, gain, bias, eps } => {
                let vx = self.value(*x).clone();
                let vg = self.value(*gain).clone();
                let d = vx.cols as f64;
                let mut dx = Mat::zeros(vx.rows, vx.cols);
                let mut dgain = Mat::zeros(1, vx.cols);
                let mut dbias = Mat::zeros(1, vx.cols);
                for r in 0..vx.rows {
                    let xr = vx.row(r);
                    let gr = g.row(r);
                    let mean = xr.iter().sum::<f64>() / d;
                    let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = xr.iter().map(|v| (v - mean) * inv).collect();
                    let dxhat: Vec<f64> =
                        gr.iter().zip(&vg.data).map(|(gv, gw)| gv * gw).collect();
                    let mean_dxhat = dxhat.iter().sum::<f64>() / d;
                    let mean_dxhat_xhat =
                        dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d;
                    for c in 0..vx.cols {
                        dx.row_mut(r)[c] =
                            inv * (dxhat[c] - mean_dxhat - xhat[c] * mean_dxhat_xhat);
                        dgain.data[c] += gr[c] * xhat[c];
                        dbias.data[c] += gr[c];
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gain, dgain);
                self.accumulate(grads, *bias, dbias);
            }
            Op::CosineToTable { x, table } => {
                let vx = self.value(*x);
                let s = &self.nodes[i].value;
                let nx = crate::mat::norm(&vx.data);
                let mut dx = Mat::zeros(1, vx.cols);
                for k in 0..table.rows {
                    let gk = g.data[k];
                    if gk == 0.0 {
                        continue;
                    }
                    let yk = table.row(k);
                    let ny = crate::mat::norm(yk);
                    let sk = s.data[k];
                    for c in 0..vx.cols {
                        dx.data[c] += gk * (yk[c] / (nx * ny) - sk * vx.data[c] / (nx * nx));
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::CeFromScores { scores, target, probs, live } => {
                let gs = g.data[0];
                let live_mass: f64 = target
                    .iter()
                    .zip(live)
                    .filter(|(_, &l)| l)
                    .map(|(t, _)| *t)
                    .sum();
                let mut ds = Mat::zeros(1, target.len());
                for m in 0..target.len() {
                    let direct = if live[m] { target[m] } else { 0.0 };
                    ds.data[m] = gs * (probs[m] * live_mass - direct);
                }
                self.accumulate(grads, *scores, ds);
            }
            Op::SumSq(a) => {
                let va = self.value(*a);
                let mut da = va.clone();
                da.scale_assign(2.0 * g.data[0]);
                self.accumulate(grads, *a, da);
            }
        }
    }
}

/// Probabilities below this are clamped inside cross-entropies so early
/// training at sharp temperatures cannot produce infinite losses.
pub const LOG_CLAMP: f64 = 1e-12;
