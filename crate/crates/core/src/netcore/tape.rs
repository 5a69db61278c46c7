//! Reverse-mode automatic differentiation over 2-D `f64` matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters enter
//! through [`Tape::param`]; only tensors flagged trainable in the store (and
//! only when the tape tracks gradients) become gradient leaves, so frozen
//! weights never receive an update path.

use std::collections::HashMap;
use std::rc::Rc;

use super::mat::{gemm, matmul, Mat};
use super::params::{ParamId, ParamStore};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Which rows attend to which inside a multi-head attention call.
///
/// Each group is an ordered list of row indices forming one sequence. With
/// `causal`, position `i` of a group only sees positions `0..=i`.
/// `key_valid`, when present, is indexed by row and masks keys out.
#[derive(Clone, Debug)]
pub struct AttnSpec {
    pub groups: Vec<Vec<usize>>,
    pub causal: bool,
    pub key_valid: Option<Vec<bool>>,
}

impl AttnSpec {
    /// One contiguous sequence per `(start, len)` pair.
    pub fn contiguous(segments: &[(usize, usize)], causal: bool) -> Self {
        AttnSpec {
            groups: segments
                .iter()
                .map(|&(s, l)| (s..s + l).collect())
                .collect(),
            causal,
            key_valid: None,
        }
    }
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul { a: Var, b: Var, trans_b: bool },
    AddBias { x: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Scale { x: Var, f: f64 },
    Gelu { x: Var },
    LayerNorm { x: Var, g: Var, b: Var, xhat: Mat, rstd: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, heads: usize, spec: Rc<AttnSpec>, probs: Vec<Vec<f64>> },
    GatherRows { x: Var, idx: Vec<usize> },
    SegmentMean { x: Var, segments: Vec<(usize, usize)> },
    NormalizeRows { x: Var, norms: Vec<f64> },
    MulRowsConst { x: Var, w: Vec<f64> },
    MulRowsBy { x: Var, w: Var },
    CeRows { logits: Var, labels: Vec<usize>, probs: Mat },
    SumAll { x: Var },
    SliceCols { x: Var, start: usize },
    ConcatCols { parts: Vec<Var> },
    ConcatRows { parts: Vec<Var> },
    SoftmaxRows { x: Var },
    RowMax { x: Var, argmax: Vec<usize> },
}

struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    nodes: Vec<Option<Mat>>,
    params: HashMap<ParamId, Mat>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Mat> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of a parameter, summed over every place it entered the tape.
    /// `None` for frozen parameters or parameters the loss does not touch.
    pub fn param(&self, id: ParamId) -> Option<&Mat> {
        self.params.get(&id)
    }

    pub fn params(&self) -> &HashMap<ParamId, Mat> {
        &self.params
    }

    pub fn into_params(self) -> HashMap<ParamId, Mat> {
        self.params
    }
}

pub struct Tape {
    nodes: Vec<Node>,
    track: bool,
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// Tape that records gradient paths to trainable parameters.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            track: true,
        }
    }

    /// Forward-only tape: no parameter is a gradient leaf.
    pub fn no_grad() -> Self {
        Tape {
            nodes: Vec::new(),
            track: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Mat, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that always receives a gradient, regardless of tracking mode.
    pub fn input(&mut self, value: Mat) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let t = store.get(id);
        self.nodes.push(Node {
            value: t.as_mat(),
            op: Op::Param(id),
            requires_grad: self.track && t.trainable,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let out = matmul(self.value(a), self.value(b), trans_b);
        self.push(out, Op::MatMul { a, b, trans_b }, &[a, b])
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let bias = self.value(b);
        assert_eq!(bias.rows, 1, "add_bias: bias must be a row");
        let mut out = self.value(x).clone();
        assert_eq!(out.cols, bias.cols, "add_bias: width mismatch");
        for r in 0..out.rows {
            for (o, bv) in out.row_mut(r).iter_mut().zip(&bias.data) {
                *o += bv;
            }
        }
        self.push(out, Op::AddBias { x, b }, &[x, b])
    }

    /// `x · w + b` with `w: [in × out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let y = self.matmul(x, w, false);
        match b {
            Some(b) => self.add_bias(y, b),
            None => y,
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        assert_eq!(out.shape(), self.value(b).shape(), "add: shape mismatch");
        out.add_assign(self.value(b));
        self.push(out, Op::Add { a, b }, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        let bv = self.value(b);
        assert_eq!(out.shape(), bv.shape(), "sub: shape mismatch");
        for (o, v) in out.data.iter_mut().zip(&bv.data) {
            *o -= v;
        }
        self.push(out, Op::Sub { a, b }, &[a, b])
    }

    pub fn scale(&mut self, x: Var, f: f64) -> Var {
        let mut out = self.value(x).clone();
        for v in &mut out.data {
            *v *= f;
        }
        self.push(out, Op::Scale { x, f }, &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for v in &mut out.data {
            *v = gelu(*v);
        }
        self.push(out, Op::Gelu { x }, &[x])
    }

    pub fn layer_norm(&mut self, x: Var, g: Var, b: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let gv = self.value(g);
        let bv = self.value(b);
        assert_eq!((gv.rows, gv.cols), (1, cols), "layer_norm: gain width");
        assert_eq!((bv.rows, bv.cols), (1, cols), "layer_norm: bias width");
        let mut xhat = Mat::zeros(rows, cols);
        let mut out = Mat::zeros(rows, cols);
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd.push(rs);
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat.data[r * cols + c] = h;
                out.data[r * cols + c] = h * gv.data[c] + bv.data[c];
            }
        }
        self.push(out, Op::LayerNorm { x, g, b, xhat, rstd }, &[x, g, b])
    }

    /// Scaled dot-product multi-head attention over the groups in `spec`.
    /// `q`, `k`, `v` are `[rows × d]`; the output has the same shape.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, spec: Rc<AttnSpec>) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (rows, d) = qv.shape();
        assert_eq!(kv.shape(), (rows, d));
        assert_eq!(vv.shape(), (rows, d));
        assert!(heads > 0 && d % heads == 0, "attention: heads must divide width");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Mat::zeros(rows, d);
        let mut probs = Vec::with_capacity(spec.groups.len() * heads);
        for group in &spec.groups {
            let len = group.len();
            for h in 0..heads {
                let off = h * dh;
                let mut p = vec![0.0; len * len];
                for (i, &ri) in group.iter().enumerate() {
                    let qi = &qv.row(ri)[off..off + dh];
                    let mut maxs = f64::NEG_INFINITY;
                    for (j, &rj) in group.iter().enumerate() {
                        if !allowed(&spec, i, j, rj) {
                            continue;
                        }
                        let kj = &kv.row(rj)[off..off + dh];
                        let s = dot(qi, kj) * scale;
                        p[i * len + j] = s;
                        maxs = maxs.max(s);
                    }
                    if maxs == f64::NEG_INFINITY {
                        continue;
                    }
                    let mut z = 0.0;
                    for (j, &rj) in group.iter().enumerate() {
                        if allowed(&spec, i, j, rj) {
                            let e = (p[i * len + j] - maxs).exp();
                            p[i * len + j] = e;
                            z += e;
                        } else {
                            p[i * len + j] = 0.0;
                        }
                    }
                    let orow = &mut out.data[ri * d + off..ri * d + off + dh];
                    for (j, &rj) in group.iter().enumerate() {
                        let w = p[i * len + j] / z;
                        p[i * len + j] = w;
                        if w != 0.0 {
                            let vj = &vv.row(rj)[off..off + dh];
                            for (o, x) in orow.iter_mut().zip(vj) {
                                *o += w * x;
                            }
                        }
                    }
                }
                probs.push(p);
            }
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                spec,
                probs,
            },
            &[q, k, v],
        )
    }

    /// Attention probabilities recorded for `(group, head)` of an attention node.
    pub fn attention_probs(&self, node: Var, group: usize, head: usize) -> Option<&[f64]> {
        match &self.nodes[node.0].op {
            Op::Attention { heads, probs, .. } => probs.get(group * heads + head).map(Vec::as_slice),
            _ => None,
        }
    }

    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Var {
        let xv = self.value(x);
        let mut out = Mat::zeros(idx.len(), xv.cols);
        for (i, &r) in idx.iter().enumerate() {
            out.row_mut(i).copy_from_slice(xv.row(r));
        }
        self.push(out, Op::GatherRows { x, idx }, &[x])
    }

    pub fn segment_mean(&mut self, x: Var, segments: Vec<(usize, usize)>) -> Var {
        let xv = self.value(x);
        let mut out = Mat::zeros(segments.len(), xv.cols);
        for (s, &(start, len)) in segments.iter().enumerate() {
            assert!(len > 0, "segment_mean: empty segment");
            let o = out.row_mut(s);
            for r in start..start + len {
                for (a, b) in o.iter_mut().zip(xv.row(r)) {
                    *a += b;
                }
            }
            for a in o.iter_mut() {
                *a /= len as f64;
            }
        }
        self.push(out, Op::SegmentMean { x, segments }, &[x])
    }

    /// Rows scaled to unit L2 norm. Zero rows stay zero (callers reject them
    /// before they reach a cosine).
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let mut norms = Vec::with_capacity(out.rows);
        for r in 0..out.rows {
            let row = out.row_mut(r);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            norms.push(n);
            if n > 0.0 {
                for v in row.iter_mut() {
                    *v /= n;
                }
            }
        }
        self.push(out, Op::NormalizeRows { x, norms }, &[x])
    }

    pub fn mul_rows_const(&mut self, x: Var, w: Vec<f64>) -> Var {
        let mut out = self.value(x).clone();
        assert_eq!(out.rows, w.len(), "mul_rows_const: row count");
        for (r, wr) in w.iter().enumerate() {
            for v in out.row_mut(r) {
                *v *= wr;
            }
        }
        self.push(out, Op::MulRowsConst { x, w }, &[x])
    }

    /// Scales row `i` of `x` by `w[i, 0]`.
    pub fn mul_rows_by(&mut self, x: Var, w: Var) -> Var {
        let wv = self.value(w).clone();
        let mut out = self.value(x).clone();
        assert_eq!((wv.rows, wv.cols), (out.rows, 1), "mul_rows_by: weight shape");
        for r in 0..out.rows {
            let f = wv.data[r];
            for v in out.row_mut(r) {
                *v *= f;
            }
        }
        self.push(out, Op::MulRowsBy { x, w }, &[x, w])
    }

    /// Per-row cross-entropy `-log softmax(logits_i)[labels_i]`, `[rows × 1]`.
    pub fn cross_entropy_rows(&mut self, logits: Var, labels: Vec<usize>) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows, labels.len(), "cross_entropy_rows: label count");
        let mut probs = Mat::zeros(lv.rows, lv.cols);
        let mut out = Mat::zeros(lv.rows, 1);
        for r in 0..lv.rows {
            let row = lv.row(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            let lse = m + z.ln();
            for (c, v) in row.iter().enumerate() {
                probs.data[r * lv.cols + c] = (v - lse).exp();
            }
            out.data[r] = lse - row[labels[r]];
        }
        self.push(out, Op::CeRows { logits, labels, probs }, &[logits])
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().sum();
        self.push(Mat::scalar(s), Op::SumAll { x }, &[x])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        assert!(start + len <= xv.cols, "slice_cols: out of range");
        let mut out = Mat::zeros(xv.rows, len);
        for r in 0..xv.rows {
            out.row_mut(r).copy_from_slice(&xv.row(r)[start..start + len]);
        }
        self.push(out, Op::SliceCols { x, start }, &[x])
    }

    pub fn concat_cols(&mut self, parts: Vec<Var>) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|p| self.value(*p).cols).sum();
        let mut out = Mat::zeros(rows, cols);
        let mut off = 0;
        for p in &parts {
            let pv = self.value(*p);
            assert_eq!(pv.rows, rows, "concat_cols: row mismatch");
            for r in 0..rows {
                out.data[r * cols + off..r * cols + off + pv.cols].copy_from_slice(pv.row(r));
            }
            off += pv.cols;
        }
        let ps = parts.clone();
        self.push(out, Op::ConcatCols { parts }, &ps)
    }

    pub fn concat_rows(&mut self, parts: Vec<Var>) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in &parts {
            let pv = self.value(*p);
            assert_eq!(pv.cols, cols, "concat_rows: width mismatch");
            data.extend_from_slice(&pv.data);
            rows += pv.rows;
        }
        let ps = parts.clone();
        self.push(Mat::from_vec(rows, cols, data), Op::ConcatRows { parts }, &ps)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for r in 0..out.rows {
            softmax_in_place(out.row_mut(r));
        }
        self.push(out, Op::SoftmaxRows { x }, &[x])
    }

    pub fn row_max(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = Mat::zeros(xv.rows, 1);
        let mut argmax = Vec::with_capacity(xv.rows);
        for r in 0..xv.rows {
            let (i, m) = argmax_first(xv.row(r));
            argmax.push(i);
            out.data[r] = m;
        }
        self.push(out, Op::RowMax { x, argmax }, &[x])
    }

    /// Backpropagates from the scalar node `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward: loss must be scalar");
        let n = self.nodes.len();
        let mut grads: Vec<Option<Mat>> = (0..n).map(|_| None).collect();
        let mut params: HashMap<ParamId, Mat> = HashMap::new();
        grads[loss.0] = Some(Mat::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let need = |v: &Var| self.nodes[v.0].requires_grad;
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                }
                Op::Param(id) => {
                    match params.get_mut(id) {
                        Some(acc) => acc.add_assign(&g),
                        None => {
                            params.insert(*id, g.clone());
                        }
                    }
                    grads[i] = Some(g);
                }
                Op::MatMul { a, b, trans_b } => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    if need(a) {
                        let mut da = Mat::zeros(av.rows, av.cols);
                        gemm(1.0, &g, false, bv, !*trans_b, 0.0, &mut da);
                        accumulate(&mut grads, *a, da);
                    }
                    if need(b) {
                        let mut db = Mat::zeros(bv.rows, bv.cols);
                        if *trans_b {
                            gemm(1.0, &g, true, av, false, 0.0, &mut db);
                        } else {
                            gemm(1.0, av, true, &g, false, 0.0, &mut db);
                        }
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::AddBias { x, b } => {
                    if need(b) {
                        let mut db = Mat::zeros(1, g.cols);
                        for r in 0..g.rows {
                            for (d, v) in db.data.iter_mut().zip(g.row(r)) {
                                *d += v;
                            }
                        }
                        accumulate(&mut grads, *b, db);
                    }
                    if need(x) {
                        accumulate(&mut grads, *x, g);
                    }
                }
                Op::Add { a, b } => {
                    if need(a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if need(b) {
                        accumulate(&mut grads, *b, g);
                    }
                }
                Op::Sub { a, b } => {
                    if need(b) {
                        let mut nb = g.clone();
                        for v in &mut nb.data {
                            *v = -*v;
                        }
                        accumulate(&mut grads, *b, nb);
                    }
                    if need(a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Scale { x, f } => {
                    let mut dx = g;
                    for v in &mut dx.data {
                        *v *= f;
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Gelu { x } => {
                    let xv = self.value(*x);
                    let mut dx = g;
                    for (d, xi) in dx.data.iter_mut().zip(&xv.data) {
                        *d *= gelu_grad(*xi);
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::LayerNorm { x, g: gain, b, xhat, rstd } => {
                    let (rows, cols) = xhat.shape();
                    let gv = self.value(*gain);
                    if need(gain) {
                        let mut dg = Mat::zeros(1, cols);
                        for r in 0..rows {
                            for c in 0..cols {
                                dg.data[c] += g.data[r * cols + c] * xhat.data[r * cols + c];
                            }
                        }
                        accumulate(&mut grads, *gain, dg);
                    }
                    if need(b) {
                        let mut db = Mat::zeros(1, cols);
                        for r in 0..rows {
                            for (d, v) in db.data.iter_mut().zip(g.row(r)) {
                                *d += v;
                            }
                        }
                        accumulate(&mut grads, *b, db);
                    }
                    if need(x) {
                        let mut dx = Mat::zeros(rows, cols);
                        let mut dxh = vec![0.0; cols];
                        for r in 0..rows {
                            let mut m1 = 0.0;
                            let mut m2 = 0.0;
                            for c in 0..cols {
                                let v = g.data[r * cols + c] * gv.data[c];
                                dxh[c] = v;
                                m1 += v;
                                m2 += v * xhat.data[r * cols + c];
                            }
                            m1 /= cols as f64;
                            m2 /= cols as f64;
                            for c in 0..cols {
                                dx.data[r * cols + c] =
                                    rstd[r] * (dxh[c] - m1 - xhat.data[r * cols + c] * m2);
                            }
                        }
                        accumulate(&mut grads, *x, dx);
                    }
                }
                Op::Attention { q, k, v, heads, spec, probs } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let (rows, d) = qv.shape();
                    let dh = d / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut dq = Mat::zeros(rows, d);
                    let mut dk = Mat::zeros(rows, d);
                    let mut dv = Mat::zeros(rows, d);
                    for (gi, group) in spec.groups.iter().enumerate() {
                        let len = group.len();
                        for h in 0..*heads {
                            let p = &probs[gi * heads + h];
                            let off = h * dh;
                            for (i, &ri) in group.iter().enumerate() {
                                let gout = &g.row(ri)[off..off + dh];
                                // dP_ij = gout · v_j ; dv_j += P_ij gout
                                let mut dp = vec![0.0; len];
                                let mut pdp = 0.0;
                                for (j, &rj) in group.iter().enumerate() {
                                    let pij = p[i * len + j];
                                    if pij == 0.0 {
                                        continue;
                                    }
                                    let vj = &vv.row(rj)[off..off + dh];
                                    dp[j] = dot(gout, vj);
                                    pdp += pij * dp[j];
                                    let dvj = &mut dv.data[rj * d + off..rj * d + off + dh];
                                    for (a, b) in dvj.iter_mut().zip(gout) {
                                        *a += pij * b;
                                    }
                                }
                                for (j, &rj) in group.iter().enumerate() {
                                    let pij = p[i * len + j];
                                    if pij == 0.0 {
                                        continue;
                                    }
                                    let ds = pij * (dp[j] - pdp) * scale;
                                    for c in 0..dh {
                                        dq.data[ri * d + off + c] += ds * kv.data[rj * d + off + c];
                                        dk.data[rj * d + off + c] += ds * qv.data[ri * d + off + c];
                                    }
                                }
                            }
                        }
                    }
                    if need(q) {
                        accumulate(&mut grads, *q, dq);
                    }
                    if need(k) {
                        accumulate(&mut grads, *k, dk);
                    }
                    if need(v) {
                        accumulate(&mut grads, *v, dv);
                    }
                }
                Op::GatherRows { x, idx } => {
                    let xv = self.value(*x);
                    let mut dx = Mat::zeros(xv.rows, xv.cols);
                    for (i, &r) in idx.iter().enumerate() {
                        for (a, b) in dx.row_mut(r).iter_mut().zip(g.row(i)) {
                            *a += b;
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::SegmentMean { x, segments } => {
                    let xv = self.value(*x);
                    let mut dx = Mat::zeros(xv.rows, xv.cols);
                    for (s, &(start, len)) in segments.iter().enumerate() {
                        let inv = 1.0 / len as f64;
                        for r in start..start + len {
                            for (a, b) in dx.row_mut(r).iter_mut().zip(g.row(s)) {
                                *a += b * inv;
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::NormalizeRows { x, norms } => {
                    let y = &node.value;
                    let mut dx = Mat::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        if norms[r] == 0.0 {
                            continue;
                        }
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let yg = dot(yr, gr);
                        for (c, d) in dx.row_mut(r).iter_mut().enumerate() {
                            *d = (gr[c] - yr[c] * yg) / norms[r];
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::MulRowsConst { x, w } => {
                    let mut dx = g;
                    for (r, wr) in w.iter().enumerate() {
                        for v in dx.row_mut(r) {
                            *v *= wr;
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::MulRowsBy { x, w } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    if need(w) {
                        let mut dw = Mat::zeros(wv.rows, 1);
                        for r in 0..xv.rows {
                            dw.data[r] = dot(xv.row(r), g.row(r));
                        }
                        accumulate(&mut grads, *w, dw);
                    }
                    if need(x) {
                        let mut dx = g;
                        for r in 0..dx.rows {
                            let f = wv.data[r];
                            for v in dx.row_mut(r) {
                                *v *= f;
                            }
                        }
                        accumulate(&mut grads, *x, dx);
                    }
                }
                Op::CeRows { logits, labels, probs } => {
                    let mut dl = probs.clone();
                    for r in 0..dl.rows {
                        dl.data[r * dl.cols + labels[r]] -= 1.0;
                        let f = g.data[r];
                        for v in dl.row_mut(r) {
                            *v *= f;
                        }
                    }
                    accumulate(&mut grads, *logits, dl);
                }
                Op::SumAll { x } => {
                    let xv = self.value(*x);
                    let s = g.data[0];
                    accumulate(&mut grads, *x, Mat::from_vec(xv.rows, xv.cols, vec![s; xv.rows * xv.cols]));
                }
                Op::SliceCols { x, start } => {
                    let xv = self.value(*x);
                    let mut dx = Mat::zeros(xv.rows, xv.cols);
                    for r in 0..xv.rows {
                        dx.row_mut(r)[*start..*start + g.cols].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::ConcatCols { parts } => {
                    let mut off = 0;
                    for p in parts {
                        let pc = self.value(*p).cols;
                        if need(p) {
                            let mut dp = Mat::zeros(g.rows, pc);
                            for r in 0..g.rows {
                                dp.row_mut(r).copy_from_slice(&g.row(r)[off..off + pc]);
                            }
                            accumulate(&mut grads, *p, dp);
                        }
                        off += pc;
                    }
                }
                Op::ConcatRows { parts } => {
                    let mut off = 0;
                    for p in parts {
                        let pr = self.value(*p).rows;
                        if need(p) {
                            let dp = Mat::from_vec(
                                pr,
                                g.cols,
                                g.data[off * g.cols..(off + pr) * g.cols].to_vec(),
                            );
                            accumulate(&mut grads, *p, dp);
                        }
                        off += pr;
                    }
                }
                Op::SoftmaxRows { x } => {
                    let y = &node.value;
                    let mut dx = Mat::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let s = dot(yr, gr);
                        for (c, d) in dx.row_mut(r).iter_mut().enumerate() {
                            *d = yr[c] * (gr[c] - s);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::RowMax { x, argmax } => {
                    let xv = self.value(*x);
                    let mut dx = Mat::zeros(xv.rows, xv.cols);
                    for (r, &c) in argmax.iter().enumerate() {
                        dx.data[r * xv.cols + c] = g.data[r];
                    }
                    accumulate(&mut grads, *x, dx);
                }
            }
        }
        Gradients {
            nodes: grads,
            params,
        }
    }
}

fn allowed(spec: &AttnSpec, i: usize, j: usize, row_j: usize) -> bool {
    if spec.causal && j > i {
        return false;
    }
    match &spec.key_valid {
        Some(valid) => valid[row_j],
        None => true,
    }
}

fn accumulate(grads: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
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

/// First index of the maximum; ties resolve to the lowest index.
pub(crate) fn argmax_first(row: &[f64]) -> (usize, f64) {
    let mut best = (0, row[0]);
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}
