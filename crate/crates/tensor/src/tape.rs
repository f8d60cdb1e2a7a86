//! Define-by-run reverse-mode differentiation.
//!
//! Every operation on a [`Var`] appends a node to its [`Tape`], storing the
//! forward value and enough metadata to replay the chain rule. A tape is
//! built fresh for each training step and dropped afterwards.

use std::cell::RefCell;

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum UnaryKind {
    Neg,
    Exp,
    Log,
    Sqrt,
    Square,
    Tanh,
    Sigmoid,
    Silu,
    Softplus,
    Scale(f64),
    AddScalar(f64),
    Clamp(f64, f64),
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Binary {
        kind: BinaryKind,
        a: usize,
        b: usize,
    },
    Unary {
        kind: UnaryKind,
        a: usize,
    },
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Sum {
        a: usize,
        mean: bool,
    },
    SumAxis {
        a: usize,
        outer: usize,
        len: usize,
        inner: usize,
        mean: bool,
    },
    Softmax {
        a: usize,
        cols: usize,
    },
    LogSoftmax {
        a: usize,
        cols: usize,
    },
    LayerNorm {
        a: usize,
        cols: usize,
        rstd: Vec<f64>,
    },
    Reshape {
        a: usize,
    },
    TransposeLast2 {
        a: usize,
        batch: usize,
        rows: usize,
        cols: usize,
    },
    ConcatLast {
        parts: Vec<(usize, usize)>,
        rows: usize,
    },
    GatherRows {
        a: usize,
        index: Vec<usize>,
        row_len: usize,
    },
    Pick {
        a: usize,
        index: Vec<usize>,
        cols: usize,
    },
    Im2Col3 {
        a: usize,
        dims: [usize; 4],
    },
    AvgPool2 {
        a: usize,
        dims: [usize; 4],
    },
    Upsample2 {
        a: usize,
        dims: [usize; 4],
    },
    CrossAttention {
        q: usize,
        k: usize,
        v: usize,
        heads: usize,
        q_rows: usize,
        kv_offsets: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Recording of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

/// Result of [`Tape::backward`]: one gradient buffer per reachable node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, `None` if `var` does not
    /// require a gradient or does not influence the loss.
    pub fn get(&self, var: Var<'_>) -> Option<&[f64]> {
        self.grads.get(var.id).and_then(|g| g.as_deref())
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For each flat index of `out`, the flat index of the broadcast operand.
fn index_map(out: &[usize], inp: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let pad = rank - inp.len();
    let mut strides = vec![0usize; rank];
    let mut stride = 1;
    for i in (0..inp.len()).rev() {
        if inp[i] != 1 {
            strides[pad + i] = stride;
        }
        stride *= inp[i];
    }
    let n = numel(out);
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut cur = 0usize;
    for _ in 0..n {
        map.push(cur);
        let mut d = rank;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            cur += strides[d];
            if idx[d] < out[d] {
                break;
            }
            cur -= strides[d] * out[d];
            idx[d] = 0;
        }
    }
    map
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `c[m×n] (+)= a · b` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: the slices cover every index addressed by the given strides and
    // dimensions, as checked by the callers' shape validation.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            if accumulate { 1.0 } else { 0.0 },
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var<'_> {
        debug_assert_eq!(numel(&shape), value.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn own(&self, v: Var<'_>) -> Result<usize> {
        if std::ptr::eq(self, v.tape) {
            Ok(v.id)
        } else {
            Err(TensorError::ForeignVar)
        }
    }

    /// Leaf holding a copy of `tensor`; tracks gradients iff the tensor does.
    pub fn leaf(&self, tensor: &Tensor) -> Var<'_> {
        self.push(
            tensor.shape().to_vec(),
            tensor.data().to_vec(),
            Op::Leaf,
            tensor.requires_grad(),
        )
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, tensor: &Tensor) -> Var<'_> {
        self.push(tensor.shape().to_vec(), tensor.data().to_vec(), Op::Leaf, false)
    }

    pub fn constant_from(&self, shape: &[usize], data: Vec<f64>) -> Result<Var<'_>> {
        if numel(shape) != data.len() {
            return Err(TensorError::DataLength {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(self.push(shape.to_vec(), data, Op::Leaf, false))
    }

    /// Concatenate along the last axis; all leading dimensions must agree.
    pub fn concat_last(&self, parts: &[Var<'_>]) -> Result<Var<'_>> {
        let nodes = self.nodes.borrow();
        let first = parts.first().ok_or_else(|| TensorError::InvalidShape {
            op: "concat",
            shape: vec![],
            reason: "no inputs".into(),
        })?;
        let lead = {
            let s = &nodes[self.own(*first)?].shape;
            s[..s.len() - 1].to_vec()
        };
        let rows = numel(&lead);
        let mut spec = Vec::with_capacity(parts.len());
        let mut total = 0;
        let mut rg = false;
        for p in parts {
            let id = self.own(*p)?;
            let s = &nodes[id].shape;
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: nodes[first.id].shape.clone(),
                    rhs: s.clone(),
                });
            }
            let w = s[s.len() - 1];
            spec.push((id, w));
            total += w;
            rg |= nodes[id].requires_grad;
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &(id, w) in &spec {
                out.extend_from_slice(&nodes[id].value[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        drop(nodes);
        Ok(self.push(shape, out, Op::ConcatLast { parts: spec, rows }, rg))
    }

    /// Multi-head attention of query rows over per-segment key/value rows.
    ///
    /// `q` has `segments * q_rows` rows; segment `s` attends to the key/value
    /// rows `kv_offsets[s]..kv_offsets[s + 1]`. No projections are applied.
    pub fn cross_attention<'t>(
        &'t self,
        q: Var<'t>,
        k: Var<'t>,
        v: Var<'t>,
        heads: usize,
        q_rows: usize,
        kv_offsets: &[usize],
    ) -> Result<Var<'t>> {
        let (qi, ki, vi) = (self.own(q)?, self.own(k)?, self.own(v)?);
        let nodes = self.nodes.borrow();
        let (qs, ks, vs) = (&nodes[qi].shape, &nodes[ki].shape, &nodes[vi].shape);
        if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 {
            return Err(TensorError::InvalidShape {
                op: "cross_attention",
                shape: qs.clone(),
                reason: "q, k, v must be matrices".into(),
            });
        }
        let d = qs[1];
        if ks[1] != d || vs[1] != d || ks[0] != vs[0] {
            return Err(TensorError::ShapeMismatch {
                op: "cross_attention",
                lhs: qs.clone(),
                rhs: ks.clone(),
            });
        }
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::InvalidShape {
                op: "cross_attention",
                shape: qs.clone(),
                reason: format!("width not divisible by {heads} heads"),
            });
        }
        let segments = kv_offsets.len().saturating_sub(1);
        if segments == 0
            || q_rows * segments != qs[0]
            || kv_offsets[0] != 0
            || kv_offsets[segments] != ks[0]
            || kv_offsets.windows(2).any(|w| w[1] <= w[0])
        {
            return Err(TensorError::InvalidShape {
                op: "cross_attention",
                shape: ks.clone(),
                reason: "segment offsets do not partition the rows".into(),
            });
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (&nodes[qi].value, &nodes[ki].value, &nodes[vi].value);
        let mut out = vec![0.0; qs[0] * d];
        let mut probs = Vec::new();
        let mut scores = Vec::new();
        for s in 0..segments {
            let (k0, k1) = (kv_offsets[s], kv_offsets[s + 1]);
            let m = k1 - k0;
            for l in 0..q_rows {
                let row = s * q_rows + l;
                for h in 0..heads {
                    let qrow = &qv[row * d + h * dh..row * d + (h + 1) * dh];
                    scores.clear();
                    let mut max = f64::NEG_INFINITY;
                    for j in k0..k1 {
                        let krow = &kv[j * d + h * dh..j * d + (h + 1) * dh];
                        let sc = qrow.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>() * scale;
                        max = max.max(sc);
                        scores.push(sc);
                    }
                    let mut z = 0.0;
                    for sc in scores.iter_mut() {
                        *sc = (*sc - max).exp();
                        z += *sc;
                    }
                    let orow = &mut out[row * d + h * dh..row * d + (h + 1) * dh];
                    for (jj, sc) in scores.iter().enumerate() {
                        let p = sc / z;
                        probs.push(p);
                        let vrow = &vv[(k0 + jj) * d + h * dh..(k0 + jj) * d + (h + 1) * dh];
                        for (o, x) in orow.iter_mut().zip(vrow) {
                            *o += p * x;
                        }
                    }
                    debug_assert_eq!(scores.len(), m);
                }
            }
        }
        let rg = nodes[qi].requires_grad || nodes[ki].requires_grad || nodes[vi].requires_grad;
        let shape = qs.clone();
        drop(nodes);
        Ok(self.push(
            shape,
            out,
            Op::CrossAttention {
                q: qi,
                k: ki,
                v: vi,
                heads,
                q_rows,
                kv_offsets: kv_offsets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let root = self.own(loss)?;
        let nodes = self.nodes.borrow();
        if nodes[root].value.len() != 1 {
            return Err(TensorError::NonScalarLoss(nodes[root].shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root + 1];
        if nodes[root].requires_grad {
            grads[root] = Some(vec![1.0]);
        }
        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            backprop_node(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

/// Accumulation buffer for `id`, or `None` when it does not need a gradient.
fn slot<'g>(grads: &'g mut [Option<Vec<f64>>], nodes: &[Node], id: usize) -> Option<&'g mut Vec<f64>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let len = nodes[id].value.len();
    Some(grads[id].get_or_insert_with(|| vec![0.0; len]))
}

fn backprop_node(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    match &node.op {
        Op::Leaf => {}
        Op::Binary { kind, a, b } => {
            let (a, b) = (*a, *b);
            let out_shape = &node.shape;
            let map_a = (nodes[a].shape != *out_shape).then(|| index_map(out_shape, &nodes[a].shape));
            let map_b = (nodes[b].shape != *out_shape).then(|| index_map(out_shape, &nodes[b].shape));
            let ia = |i: usize| map_a.as_ref().map_or(i, |m| m[i]);
            let ib = |i: usize| map_b.as_ref().map_or(i, |m| m[i]);
            let (av, bv) = (&nodes[a].value, &nodes[b].value);
            if let Some(ga) = slot(grads, nodes, a) {
                for (i, gi) in g.iter().enumerate() {
                    ga[ia(i)] += match kind {
                        BinaryKind::Add | BinaryKind::Sub => *gi,
                        BinaryKind::Mul => gi * bv[ib(i)],
                        BinaryKind::Div => gi / bv[ib(i)],
                    };
                }
            }
            if let Some(gb) = slot(grads, nodes, b) {
                for (i, gi) in g.iter().enumerate() {
                    gb[ib(i)] += match kind {
                        BinaryKind::Add => *gi,
                        BinaryKind::Sub => -gi,
                        BinaryKind::Mul => gi * av[ia(i)],
                        BinaryKind::Div => {
                            let y = bv[ib(i)];
                            -gi * av[ia(i)] / (y * y)
                        }
                    };
                }
            }
        }
        Op::Unary { kind, a } => {
            let x = &nodes[*a].value;
            let y = &node.value;
            if let Some(ga) = slot(grads, nodes, *a) {
                for i in 0..g.len() {
                    let d = match *kind {
                        UnaryKind::Neg => -1.0,
                        UnaryKind::Exp => y[i],
                        UnaryKind::Log => 1.0 / x[i],
                        UnaryKind::Sqrt => 0.5 / y[i],
                        UnaryKind::Square => 2.0 * x[i],
                        UnaryKind::Tanh => 1.0 - y[i] * y[i],
                        UnaryKind::Sigmoid => y[i] * (1.0 - y[i]),
                        UnaryKind::Silu => {
                            let s = sigmoid(x[i]);
                            s + x[i] * s * (1.0 - s)
                        }
                        UnaryKind::Softplus => sigmoid(x[i]),
                        UnaryKind::Scale(c) => c,
                        UnaryKind::AddScalar(_) => 1.0,
                        UnaryKind::Clamp(lo, hi) => {
                            if x[i] >= lo && x[i] <= hi {
                                1.0
                            } else {
                                0.0
                            }
                        }
                    };
                    ga[i] += g[i] * d;
                }
            }
        }
        Op::MatMul { a, b, m, k, n } => {
            let (a, b, m, k, n) = (*a, *b, *m, *k, *n);
            if let Some(ga) = slot(grads, nodes, a) {
                // dA[m×k] += dC[m×n] · Bᵀ
                gemm(m, n, k, g, n, 1, &nodes[b].value, 1, n, ga, true);
            }
            if let Some(gb) = slot(grads, nodes, b) {
                // dB[k×n] += Aᵀ · dC
                gemm(k, m, n, &nodes[a].value, 1, k, g, n, 1, gb, true);
            }
        }
        Op::Sum { a, mean } => {
            let len = nodes[*a].value.len();
            let scale = if *mean { 1.0 / len as f64 } else { 1.0 };
            if let Some(ga) = slot(grads, nodes, *a) {
                for x in ga.iter_mut() {
                    *x += g[0] * scale;
                }
            }
        }
        Op::SumAxis {
            a,
            outer,
            len,
            inner,
            mean,
        } => {
            let scale = if *mean { 1.0 / *len as f64 } else { 1.0 };
            if let Some(ga) = slot(grads, nodes, *a) {
                for o in 0..*outer {
                    for l in 0..*len {
                        let base = (o * len + l) * inner;
                        for i in 0..*inner {
                            ga[base + i] += g[o * inner + i] * scale;
                        }
                    }
                }
            }
        }
        Op::Softmax { a, cols } => {
            let y = &node.value;
            if let Some(ga) = slot(grads, nodes, *a) {
                for r in 0..y.len() / cols {
                    let (yr, gr) = (&y[r * cols..(r + 1) * cols], &g[r * cols..(r + 1) * cols]);
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for c in 0..*cols {
                        ga[r * cols + c] += yr[c] * (gr[c] - dot);
                    }
                }
            }
        }
        Op::LogSoftmax { a, cols } => {
            let y = &node.value;
            if let Some(ga) = slot(grads, nodes, *a) {
                for r in 0..y.len() / cols {
                    let gr = &g[r * cols..(r + 1) * cols];
                    let total: f64 = gr.iter().sum();
                    for c in 0..*cols {
                        ga[r * cols + c] += gr[c] - y[r * cols + c].exp() * total;
                    }
                }
            }
        }
        Op::LayerNorm { a, cols, rstd } => {
            let xhat = &node.value;
            let cols = *cols;
            if let Some(ga) = slot(grads, nodes, *a) {
                for (r, rs) in rstd.iter().enumerate() {
                    let (xr, gr) = (&xhat[r * cols..(r + 1) * cols], &g[r * cols..(r + 1) * cols]);
                    let mean_g = gr.iter().sum::<f64>() / cols as f64;
                    let mean_gx = xr.iter().zip(gr).map(|(x, q)| x * q).sum::<f64>() / cols as f64;
                    for c in 0..cols {
                        ga[r * cols + c] += rs * (gr[c] - mean_g - xr[c] * mean_gx);
                    }
                }
            }
        }
        Op::Reshape { a } => {
            if let Some(ga) = slot(grads, nodes, *a) {
                for (x, gi) in ga.iter_mut().zip(g) {
                    *x += gi;
                }
            }
        }
        Op::TransposeLast2 {
            a,
            batch,
            rows,
            cols,
        } => {
            if let Some(ga) = slot(grads, nodes, *a) {
                let (rows, cols) = (*rows, *cols);
                for bt in 0..*batch {
                    let base = bt * rows * cols;
                    for r in 0..rows {
                        for c in 0..cols {
                            ga[base + r * cols + c] += g[base + c * rows + r];
                        }
                    }
                }
            }
        }
        Op::ConcatLast { parts, rows } => {
            let total: usize = parts.iter().map(|p| p.1).sum();
            let mut offset = 0;
            for &(pid, w) in parts {
                if let Some(gp) = slot(grads, nodes, pid) {
                    for r in 0..*rows {
                        for c in 0..w {
                            gp[r * w + c] += g[r * total + offset + c];
                        }
                    }
                }
                offset += w;
            }
        }
        Op::GatherRows { a, index, row_len } => {
            if let Some(ga) = slot(grads, nodes, *a) {
                for (o, &src) in index.iter().enumerate() {
                    for c in 0..*row_len {
                        ga[src * row_len + c] += g[o * row_len + c];
                    }
                }
            }
        }
        Op::Pick { a, index, cols } => {
            if let Some(ga) = slot(grads, nodes, *a) {
                for (r, &c) in index.iter().enumerate() {
                    ga[r * cols + c] += g[r];
                }
            }
        }
        Op::Im2Col3 { a, dims } => {
            let [b, h, w, c] = *dims;
            if let Some(ga) = slot(grads, nodes, *a) {
                for bi in 0..b {
                    for y in 0..h {
                        for x in 0..w {
                            let orow = ((bi * h + y) * w + x) * 9 * c;
                            for ky in 0..3 {
                                let sy = y as isize + ky as isize - 1;
                                if sy < 0 || sy >= h as isize {
                                    continue;
                                }
                                for kx in 0..3 {
                                    let sx = x as isize + kx as isize - 1;
                                    if sx < 0 || sx >= w as isize {
                                        continue;
                                    }
                                    let src = ((bi * h + sy as usize) * w + sx as usize) * c;
                                    let dst = orow + (ky * 3 + kx) * c;
                                    for ch in 0..c {
                                        ga[src + ch] += g[dst + ch];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        Op::AvgPool2 { a, dims } => {
            let [b, h, w, c] = *dims;
            let (oh, ow) = (h / 2, w / 2);
            if let Some(ga) = slot(grads, nodes, *a) {
                for bi in 0..b {
                    for y in 0..h {
                        for x in 0..w {
                            let dst = ((bi * h + y) * w + x) * c;
                            let src = ((bi * oh + y / 2) * ow + x / 2) * c;
                            for ch in 0..c {
                                ga[dst + ch] += 0.25 * g[src + ch];
                            }
                        }
                    }
                }
            }
        }
        Op::Upsample2 { a, dims } => {
            let [b, h, w, c] = *dims;
            if let Some(ga) = slot(grads, nodes, *a) {
                for bi in 0..b {
                    for y in 0..2 * h {
                        for x in 0..2 * w {
                            let src = ((bi * 2 * h + y) * 2 * w + x) * c;
                            let dst = ((bi * h + y / 2) * w + x / 2) * c;
                            for ch in 0..c {
                                ga[dst + ch] += g[src + ch];
                            }
                        }
                    }
                }
            }
        }
        Op::CrossAttention {
            q,
            k,
            v,
            heads,
            q_rows,
            kv_offsets,
            probs,
        } => {
            let (q, k, v) = (*q, *k, *v);
            let d = node.shape[1];
            let dh = d / heads;
            let scale = 1.0 / (dh as f64).sqrt();
            let (qv, kv, vv) = (&nodes[q].value, &nodes[k].value, &nodes[v].value);
            let mut gq = vec![0.0; qv.len()];
            let mut gk = vec![0.0; kv.len()];
            let mut gv = vec![0.0; vv.len()];
            let mut dprob = Vec::new();
            let mut p_idx = 0;
            for s in 0..kv_offsets.len() - 1 {
                let (k0, k1) = (kv_offsets[s], kv_offsets[s + 1]);
                let m = k1 - k0;
                for l in 0..*q_rows {
                    let row = s * q_rows + l;
                    for h in 0..*heads {
                        let hs = h * dh;
                        let grow = &g[row * d + hs..row * d + hs + dh];
                        let p = &probs[p_idx..p_idx + m];
                        dprob.clear();
                        for (jj, pj) in p.iter().enumerate() {
                            let j = k0 + jj;
                            let vrow = &vv[j * d + hs..j * d + hs + dh];
                            dprob.push(grow.iter().zip(vrow).map(|(a, b)| a * b).sum::<f64>());
                            for (gvx, gx) in gv[j * d + hs..j * d + hs + dh].iter_mut().zip(grow) {
                                *gvx += pj * gx;
                            }
                        }
                        let dot: f64 = p.iter().zip(&dprob).map(|(a, b)| a * b).sum();
                        for (jj, pj) in p.iter().enumerate() {
                            let ds = pj * (dprob[jj] - dot) * scale;
                            let j = k0 + jj;
                            for c in 0..dh {
                                gq[row * d + hs + c] += ds * kv[j * d + hs + c];
                                gk[j * d + hs + c] += ds * qv[row * d + hs + c];
                            }
                        }
                        p_idx += m;
                    }
                }
            }
            for (pid, local) in [(q, gq), (k, gk), (v, gv)] {
                if let Some(gp) = slot(grads, nodes, pid) {
                    for (x, y) in gp.iter_mut().zip(&local) {
                        *x += y;
                    }
                }
            }
        }
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Copy of the forward value.
    pub fn data(&self) -> Vec<f64> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn to_tensor(&self) -> Tensor {
        let nodes = self.tape.nodes.borrow();
        let node = &nodes[self.id];
        Tensor::new(&node.shape, node.value.clone()).expect("node shape matches value")
    }

    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.id].value[0]
    }

    fn unary(self, kind: UnaryKind) -> Var<'t> {
        let nodes = self.tape.nodes.borrow();
        let node = &nodes[self.id];
        let f = |x: f64| -> f64 {
            match kind {
                UnaryKind::Neg => -x,
                UnaryKind::Exp => x.exp(),
                UnaryKind::Log => x.ln(),
                UnaryKind::Sqrt => x.sqrt(),
                UnaryKind::Square => x * x,
                UnaryKind::Tanh => x.tanh(),
                UnaryKind::Sigmoid => sigmoid(x),
                UnaryKind::Silu => x * sigmoid(x),
                UnaryKind::Softplus => softplus(x),
                UnaryKind::Scale(c) => c * x,
                UnaryKind::AddScalar(c) => x + c,
                UnaryKind::Clamp(lo, hi) => x.clamp(lo, hi),
            }
        };
        let value = node.value.iter().map(|&x| f(x)).collect();
        let (shape, rg) = (node.shape.clone(), node.requires_grad);
        drop(nodes);
        self.tape.push(shape, value, Op::Unary { kind, a: self.id }, rg)
    }

    fn binary(self, other: Var<'t>, kind: BinaryKind, name: &'static str) -> Result<Var<'t>> {
        let b = self.tape.own(other)?;
        let nodes = self.tape.nodes.borrow();
        let (na, nb) = (&nodes[self.id], &nodes[b]);
        let out_shape = broadcast_shape(&na.shape, &nb.shape).ok_or_else(|| TensorError::ShapeMismatch {
            op: name,
            lhs: na.shape.clone(),
            rhs: nb.shape.clone(),
        })?;
        let f = |x: f64, y: f64| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        };
        let value: Vec<f64> = if na.shape == out_shape && nb.shape == out_shape {
            na.value.iter().zip(&nb.value).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ma = index_map(&out_shape, &na.shape);
            let mb = index_map(&out_shape, &nb.shape);
            ma.iter()
                .zip(&mb)
                .map(|(&i, &j)| f(na.value[i], nb.value[j]))
                .collect()
        };
        let rg = na.requires_grad || nb.requires_grad;
        drop(nodes);
        Ok(self.tape.push(out_shape, value, Op::Binary { kind, a: self.id, b }, rg))
    }

    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Add, "add")
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Sub, "sub")
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Mul, "mul")
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Div, "div")
    }

    pub fn neg(self) -> Var<'t> {
        self.unary(UnaryKind::Neg)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(UnaryKind::Exp)
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(UnaryKind::Log)
    }

    pub fn sqrt(self) -> Var<'t> {
        self.unary(UnaryKind::Sqrt)
    }

    pub fn square(self) -> Var<'t> {
        self.unary(UnaryKind::Square)
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(UnaryKind::Tanh)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(UnaryKind::Sigmoid)
    }

    pub fn silu(self) -> Var<'t> {
        self.unary(UnaryKind::Silu)
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(self) -> Var<'t> {
        self.unary(UnaryKind::Softplus)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(UnaryKind::Scale(c))
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.unary(UnaryKind::AddScalar(c))
    }

    /// Clamp into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        self.unary(UnaryKind::Clamp(lo, hi))
    }

    /// `[..., k] × [k, n] → [..., n]`, treating leading axes as rows.
    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let b = self.tape.own(rhs)?;
        let nodes = self.tape.nodes.borrow();
        let (na, nb) = (&nodes[self.id], &nodes[b]);
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: na.shape.clone(),
            rhs: nb.shape.clone(),
        };
        if na.shape.is_empty() || nb.shape.len() != 2 {
            return Err(mismatch());
        }
        let k = *na.shape.last().unwrap();
        if nb.shape[0] != k {
            return Err(mismatch());
        }
        let n = nb.shape[1];
        let m = na.value.len() / k.max(1);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &na.value, k, 1, &nb.value, n, 1, &mut out, false);
        let mut shape = na.shape.clone();
        *shape.last_mut().unwrap() = n;
        let rg = na.requires_grad || nb.requires_grad;
        drop(nodes);
        Ok(self.tape.push(shape, out, Op::MatMul { a: self.id, b, m, k, n }, rg))
    }

    fn reduce_all(self, mean: bool) -> Var<'t> {
        let nodes = self.tape.nodes.borrow();
        let node = &nodes[self.id];
        let mut total: f64 = node.value.iter().sum();
        if mean {
            total /= node.value.len() as f64;
        }
        let rg = node.requires_grad;
        drop(nodes);
        self.tape.push(vec![], vec![total], Op::Sum { a: self.id, mean }, rg)
    }

    pub fn sum(self) -> Var<'t> {
        self.reduce_all(false)
    }

    pub fn mean(self) -> Var<'t> {
        self.reduce_all(true)
    }

    fn reduce_axis(self, axis: usize, mean: bool) -> Result<Var<'t>> {
        let nodes = self.tape.nodes.borrow();
        let node = &nodes[self.id];
        if axis >= node.shape.len() {
            return Err(TensorError::InvalidShape {
                op: "sum_axis",
                shape: node.shape.clone(),
                reason: format!("axis {axis} out of range"),
            });
        }
        let outer = numel(&node.shape[..axis]);
        let len = node.shape[axis];
        let inner = numel(&node.shape[axis + 1..]);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] += node.value[base + i];
                }
            }
        }
        if mean {
            let s = 1.0 / len as f64;
            out.iter_mut().for_each(|x| *x *= s);
        }
        let mut shape = node.shape.clone();
        shape.remove(axis);
        let rg = node.requires_grad;
        drop(nodes);
        Ok(self.tape.push(
            shape,
            out,
            Op::SumAxis {
                a: self.id,
                outer,
                len,
                inner,
                mean,
            },
            rg,
        ))
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>> {
        self.reduce_axis(axis, false)
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'t>> {
        self.reduce_axis(axis, true)
    }

    fn last_axis_rows(&self, op: &'static str) -> Result<(usize, usize)> {
        let nodes = self.tape.nodes.borrow();
        let node = &nodes[self.id];
        match node.shape.last() {
            Some(&c) if c > 0 => Ok((node.value.len() / c, c)),
            _ => Err(TensorError::InvalidShape {
                op,
                shape: node.shape.clone(),
                reason: "needs a non-empty last axis".into(),
            }),
        }
    }

    pub fn softmax(self) -> Result<Var<'t>> {
        let (rows, cols) = self.last_axis_rows("softmax")?;
        let nodes = self.tape.nodes.borrow();
        let node = &nodes[self.id];
        let mut out = node.value.clone();
        for r in 0..rows {
            let row = &mut out[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                z += *x;
            }
            row.iter_mut().for_each(|x| *x /= z);
        }
        let (shape, rg) = (node.shape.clone(), node.requires_grad);
        drop(nodes);
        Ok(self.tape.push(shape, out, Op::Softmax { a: self.id, cols }, rg))
    }

    pub fn log_softmax(self) -> Result<Var<'t>> {
        let (rows, cols) = self.last_axis_rows("log_softmax")?;
        let nodes = self.tape.nodes.borrow();
        let node = &nodes[self.id];
        let mut out = node.value.clone();
        for r in 0..rows {
            let row = &mut out[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let (shape, rg) = (node.shape.clone(), node.requires_grad);
        drop(nodes);
        Ok(self.tape.push(shape, out, Op::LogSoftmax { a: self.id, cols }, rg))
    }

    /// Normalize each last-axis row to zero mean and unit variance.
    pub fn layer_norm(self, eps: f64) -> Result<Var<'t>> {
        let (rows, cols) = self.last_axis_rows("layer_norm")?;
        let nodes = self.tape.nodes.borrow();
        let node = &nodes[self.id];
        let mut out = node.value.clone();
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &mut out[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|x| *x = (*x - mean) * rs);
            rstd.push(rs);
        }
        let (shape, rg) = (node.shape.clone(), node.requires_grad);
        drop(nodes);
        Ok(self.tape.push(shape, out, Op::LayerNorm { a: self.id, cols, rstd }, rg))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let nodes = self.tape.nodes.borrow();
        let node = &nodes[self.id];
        if numel(shape) != node.value.len() {
            return Err(TensorError::InvalidShape {
                op: "reshape",
                shape: shape.to_vec(),
                reason: format!("cannot hold {} elements", node.value.len()),
            });
        }
        let (value, rg) = (node.value.clone(), node.requires_grad);
        drop(nodes);
        Ok(self.tape.push(shape.to_vec(), value, Op::Reshape { a: self.id }, rg))
    }

    /// Swap the last two axes.
    pub fn transpose_last2(self) -> Result<Var<'t>> {
        let nodes = self.tape.nodes.borrow();
        let node = &nodes[self.id];
        let r = node.shape.len();
        if r < 2 {
            return Err(TensorError::InvalidShape {
                op: "transpose",
                shape: node.shape.clone(),
                reason: "needs rank >= 2".into(),
            });
        }
        let (rows, cols) = (node.shape[r - 2], node.shape[r - 1]);
        let batch = numel(&node.shape[..r - 2]);
        let mut out = vec![0.0; node.value.len()];
        for bt in 0..batch {
            let base = bt * rows * cols;
            for i in 0..rows {
                for j in 0..cols {
                    out[base + j * rows + i] = node.value[base + i * cols + j];
                }
            }
        }
        let mut shape = node.shape.clone();
        shape.swap(r - 2, r - 1);
        let rg = node.requires_grad;
        drop(nodes);
        Ok(self.tape.push(
            shape,
            out,
            Op::TransposeLast2 {
                a: self.id,
                batch,
                rows,
                cols,
            },
            rg,
        ))
    }

    /// Select rows along the first axis (repeats allowed).
    pub fn gather_rows(self, index: &[usize]) -> Result<Var<'t>> {
        let nodes = self.tape.nodes.borrow();
        let node = &nodes[self.id];
        let rows = *node.shape.first().ok_or_else(|| TensorError::InvalidShape {
            op: "gather_rows",
            shape: vec![],
            reason: "scalar input".into(),
        })?;
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(TensorError::InvalidShape {
                op: "gather_rows",
                shape: node.shape.clone(),
                reason: format!("row {bad} out of range"),
            });
        }
        let row_len = node.value.len() / rows.max(1);
        let mut out = Vec::with_capacity(index.len() * row_len);
        for &i in index {
            out.extend_from_slice(&node.value[i * row_len..(i + 1) * row_len]);
        }
        let mut shape = node.shape.clone();
        shape[0] = index.len();
        let rg = node.requires_grad;
        drop(nodes);
        Ok(self.tape.push(
            shape,
            out,
            Op::GatherRows {
                a: self.id,
                index: index.to_vec(),
                row_len,
            },
            rg,
        ))
    }

    /// `out[r] = self[r, index[r]]` for a matrix.
    pub fn pick(self, index: &[usize]) -> Result<Var<'t>> {
        let nodes = self.tape.nodes.borrow();
        let node = &nodes[self.id];
        if node.shape.len() != 2 || node.shape[0] != index.len() || index.iter().any(|&c| c >= node.shape[1]) {
            return Err(TensorError::InvalidShape {
                op: "pick",
                shape: node.shape.clone(),
                reason: format!("{} indices", index.len()),
            });
        }
        let cols = node.shape[1];
        let out = index.iter().enumerate().map(|(r, &c)| node.value[r * cols + c]).collect();
        let rg = node.requires_grad;
        drop(nodes);
        Ok(self.tape.push(
            vec![index.len()],
            out,
            Op::Pick {
                a: self.id,
                index: index.to_vec(),
                cols,
            },
            rg,
        ))
    }

    fn dims4(&self, op: &'static str) -> Result<[usize; 4]> {
        let shape = self.shape();
        match shape[..] {
            [b, h, w, c] => Ok([b, h, w, c]),
            _ => Err(TensorError::InvalidShape {
                op,
                shape,
                reason: "expected [batch, height, width, channels]".into(),
            }),
        }
    }

    /// 3×3 patches with zero padding: `[B,H,W,C] → [B,H,W,9C]`, ordered
    /// (kernel row, kernel column, channel).
    pub fn im2col3x3(self) -> Result<Var<'t>> {
        let dims = self.dims4("im2col3x3")?;
        let [b, h, w, c] = dims;
        let nodes = self.tape.nodes.borrow();
        let x = &nodes[self.id].value;
        let mut out = vec![0.0; b * h * w * 9 * c];
        for bi in 0..b {
            for y in 0..h {
                for xx in 0..w {
                    let orow = ((bi * h + y) * w + xx) * 9 * c;
                    for ky in 0..3 {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let sx = xx as isize + kx as isize - 1;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            let src = ((bi * h + sy as usize) * w + sx as usize) * c;
                            let dst = orow + (ky * 3 + kx) * c;
                            out[dst..dst + c].copy_from_slice(&x[src..src + c]);
                        }
                    }
                }
            }
        }
        let rg = nodes[self.id].requires_grad;
        drop(nodes);
        Ok(self.tape.push(vec![b, h, w, 9 * c], out, Op::Im2Col3 { a: self.id, dims }, rg))
    }

    /// 2×2 average pooling on `[B,H,W,C]`.
    pub fn avg_pool2(self) -> Result<Var<'t>> {
        let dims = self.dims4("avg_pool2")?;
        let [b, h, w, c] = dims;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(TensorError::InvalidShape {
                op: "avg_pool2",
                shape: dims.to_vec(),
                reason: "spatial size must be even".into(),
            });
        }
        let (oh, ow) = (h / 2, w / 2);
        let nodes = self.tape.nodes.borrow();
        let x = &nodes[self.id].value;
        let mut out = vec![0.0; b * oh * ow * c];
        for bi in 0..b {
            for y in 0..h {
                for xx in 0..w {
                    let src = ((bi * h + y) * w + xx) * c;
                    let dst = ((bi * oh + y / 2) * ow + xx / 2) * c;
                    for ch in 0..c {
                        out[dst + ch] += 0.25 * x[src + ch];
                    }
                }
            }
        }
        let rg = nodes[self.id].requires_grad;
        drop(nodes);
        Ok(self.tape.push(vec![b, oh, ow, c], out, Op::AvgPool2 { a: self.id, dims }, rg))
    }

    /// Nearest-neighbour ×2 upsampling on `[B,H,W,C]`.
    pub fn upsample2(self) -> Result<Var<'t>> {
        let dims = self.dims4("upsample2")?;
        let [b, h, w, c] = dims;
        let nodes = self.tape.nodes.borrow();
        let x = &nodes[self.id].value;
        let mut out = vec![0.0; b * 4 * h * w * c];
        for bi in 0..b {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    let dst = ((bi * 2 * h + y) * 2 * w + xx) * c;
                    let src = ((bi * h + y / 2) * w + xx / 2) * c;
                    out[dst..dst + c].copy_from_slice(&x[src..src + c]);
                }
            }
        }
        let rg = nodes[self.id].requires_grad;
        drop(nodes);
        Ok(self.tape.push(vec![b, 2 * h, 2 * w, c], out, Op::Upsample2 { a: self.id, dims }, rg))
    }
}
