//! Reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] records every operation of one forward pass as a node. Node
//! values are immutable once pushed. [`Graph::backward`] walks the nodes in
//! reverse creation order and accumulates vector-Jacobian products into the
//! inputs that need gradients. Parameters enter the graph through
//! [`Graph::param`], which snapshots the store's values, so distinct graphs
//! built from the same store can live on distinct threads.

use std::cell::RefCell;
use std::sync::Arc;

use super::params::{ParamId, ParamStore};
use super::scalar::{self, INV_SIGMOID_EPS};
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug)]
enum Op {
    Leaf,
    Param(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    AddCol(usize, usize),
    MulCol(usize, usize),
    Scale(usize, f64),
    MatMul(usize, usize),
    MatMulNT(usize, usize),
    Relu(usize),
    Sigmoid(usize),
    InvSigmoid(usize),
    Exp(usize),
    Abs(usize),
    Minimum(usize, usize),
    Maximum(usize, usize),
    Clamp(usize, f64, f64),
    SoftmaxRows(usize),
    LayerNormRows(usize, f64),
    NarrowCols(usize, usize, usize),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    Gather(usize, Vec<usize>),
    Reshape(usize),
    Sum(usize),
    LinearSample {
        x: usize,
        t: usize,
        valid: usize,
    },
    DeformSample {
        value: usize,
        loc: usize,
        attn: usize,
        heads: usize,
        valid: usize,
    },
    SigmoidFocal {
        logits: usize,
        targets: Vec<bool>,
        alpha: f64,
        gamma: f64,
    },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Computation graph for one forward/backward pass.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    params: Vec<(Arc<Tensor>, bool)>,
    param_nodes: RefCell<Vec<Option<usize>>>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// A graph with no parameters bound.
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            params: Vec::new(),
            param_nodes: RefCell::new(Vec::new()),
        }
    }

    /// A graph that can read every parameter of `store`.
    pub fn with_params(store: &ParamStore) -> Self {
        let params: Vec<_> = store
            .iter()
            .map(|(_, p)| (Arc::clone(&p.value), p.trainable))
            .collect();
        let n = params.len();
        Self {
            nodes: RefCell::new(Vec::with_capacity(1024)),
            params,
            param_nodes: RefCell::new(vec![None; n]),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var<'_> {
        self.push_arc(Arc::new(value), op, needs_grad)
    }

    fn push_arc(&self, value: Arc<Tensor>, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].needs_grad)
    }

    fn val(&self, id: usize) -> Arc<Tensor> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    /// Non-differentiable input.
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable input whose gradient can be read back with
    /// [`Gradients::wrt`].
    pub fn variable(&self, t: Tensor) -> Var<'_> {
        self.push(t, Op::Leaf, true)
    }

    /// Node for a bound parameter. Repeated calls return the same node.
    pub fn param(&self, id: ParamId) -> Var<'_> {
        let idx = id.index();
        if let Some(node) = self.param_nodes.borrow()[idx] {
            return Var {
                graph: self,
                id: node,
            };
        }
        let (value, trainable) = &self.params[idx];
        let v = self.push_arc(Arc::clone(value), Op::Param(idx), *trainable);
        self.param_nodes.borrow_mut()[idx] = Some(v.id);
        v
    }

    /// Runs reverse accumulation from a single-element node.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[root.id].value.numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar root, got shape {:?}",
                nodes[root.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.id + 1];
        grads[root.id] = Some(vec![1.0]);
        let mut leaf_grads: Vec<Option<Vec<f64>>> = vec![None; root.id + 1];
        let mut param_grads: Vec<Option<Tensor>> = vec![None; self.params.len()];

        for id in (0..=root.id).rev() {
            let Some(gy) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            backward_node(&nodes, id, &gy, &mut grads, &mut leaf_grads, &mut param_grads);
        }
        Ok(Gradients {
            leaf_grads,
            param_grads,
            shapes: nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    leaf_grads: Vec<Option<Vec<f64>>>,
    param_grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to a [`Graph::variable`] leaf.
    pub fn wrt(&self, v: Var<'_>) -> Option<Tensor> {
        self.leaf_grads
            .get(v.id)
            .and_then(|g| g.clone())
            .map(|g| Tensor::from_parts(self.shapes[v.id].clone(), g))
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.param_grads.get(id.index()).and_then(Option::as_ref)
    }

    pub fn into_param_grads(self) -> Vec<Option<Tensor>> {
        self.param_grads
    }
}

fn acc<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], id: usize) -> Option<&'a mut [f64]> {
    if !nodes[id].needs_grad {
        return None;
    }
    let n = nodes[id].value.numel();
    Some(grads[id].get_or_insert_with(|| vec![0.0; n]).as_mut_slice())
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn backward_node(
    nodes: &[Node],
    id: usize,
    gy: &[f64],
    grads: &mut [Option<Vec<f64>>],
    leaf_grads: &mut [Option<Vec<f64>>],
    param_grads: &mut [Option<Tensor>],
) {
    let y = &nodes[id].value;
    let v = |i: usize| -> &Tensor { &nodes[i].value };
    match &nodes[id].op {
        Op::Leaf => leaf_grads[id] = Some(gy.to_vec()),
        Op::Param(p) => {
            let shape = y.shape().to_vec();
            match &mut param_grads[*p] {
                Some(t) => add_into(t.data_mut(), gy),
                slot => *slot = Some(Tensor::from_parts(shape, gy.to_vec())),
            }
        }
        Op::Add(a, b) => {
            if let Some(g) = acc(grads, nodes, *a) {
                add_into(g, gy);
            }
            if let Some(g) = acc(grads, nodes, *b) {
                add_into(g, gy);
            }
        }
        Op::Sub(a, b) => {
            if let Some(g) = acc(grads, nodes, *a) {
                add_into(g, gy);
            }
            if let Some(g) = acc(grads, nodes, *b) {
                for (d, s) in g.iter_mut().zip(gy) {
                    *d -= s;
                }
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (v(*a).data(), v(*b).data());
            if let Some(g) = acc(grads, nodes, *a) {
                for i in 0..g.len() {
                    g[i] += gy[i] * bv[i];
                }
            }
            if let Some(g) = acc(grads, nodes, *b) {
                for i in 0..g.len() {
                    g[i] += gy[i] * av[i];
                }
            }
        }
        Op::Div(a, b) => {
            let (av, bv) = (v(*a).data(), v(*b).data());
            if let Some(g) = acc(grads, nodes, *a) {
                for i in 0..g.len() {
                    g[i] += gy[i] / bv[i];
                }
            }
            if let Some(g) = acc(grads, nodes, *b) {
                for i in 0..g.len() {
                    g[i] -= gy[i] * av[i] / (bv[i] * bv[i]);
                }
            }
        }
        Op::AddRow(a, b) => {
            let m = v(*b).numel();
            if let Some(g) = acc(grads, nodes, *a) {
                add_into(g, gy);
            }
            if let Some(g) = acc(grads, nodes, *b) {
                for row in gy.chunks(m) {
                    add_into(g, row);
                }
            }
        }
        Op::MulRow(a, b) => {
            let (av, bv) = (v(*a).data(), v(*b).data());
            let m = bv.len();
            if let Some(g) = acc(grads, nodes, *a) {
                for (i, gi) in g.iter_mut().enumerate() {
                    *gi += gy[i] * bv[i % m];
                }
            }
            if let Some(g) = acc(grads, nodes, *b) {
                for (i, (gyi, ai)) in gy.iter().zip(av).enumerate() {
                    g[i % m] += gyi * ai;
                }
            }
        }
        Op::AddCol(a, b) => {
            let n = v(*b).numel();
            let m = gy.len() / n;
            if let Some(g) = acc(grads, nodes, *a) {
                add_into(g, gy);
            }
            if let Some(g) = acc(grads, nodes, *b) {
                for (i, row) in gy.chunks(m).enumerate() {
                    g[i] += row.iter().sum::<f64>();
                }
            }
        }
        Op::MulCol(a, b) => {
            let (av, bv) = (v(*a).data(), v(*b).data());
            let m = gy.len() / bv.len();
            if let Some(g) = acc(grads, nodes, *a) {
                for (i, gi) in g.iter_mut().enumerate() {
                    *gi += gy[i] * bv[i / m];
                }
            }
            if let Some(g) = acc(grads, nodes, *b) {
                for (i, (gyi, ai)) in gy.iter().zip(av).enumerate() {
                    g[i / m] += gyi * ai;
                }
            }
        }
        Op::Scale(a, s) => {
            if let Some(g) = acc(grads, nodes, *a) {
                for (d, x) in g.iter_mut().zip(gy) {
                    *d += s * x;
                }
            }
        }
        Op::MatMul(a, b) => {
            let (at, bt) = (v(*a), v(*b));
            let (n, k, m) = (at.rows(), at.cols(), bt.cols());
            if let Some(g) = acc(grads, nodes, *a) {
                matmul_nt_into(gy, bt.data(), g, n, m, k);
            }
            if let Some(g) = acc(grads, nodes, *b) {
                // gb[p, :] += a[i, p] * gy[i, :]
                for i in 0..n {
                    let gy_row = &gy[i * m..(i + 1) * m];
                    for p in 0..k {
                        let aip = at.data()[i * k + p];
                        if aip != 0.0 {
                            axpy(aip, gy_row, &mut g[p * m..(p + 1) * m]);
                        }
                    }
                }
            }
        }
        Op::MatMulNT(a, b) => {
            let (at, bt) = (v(*a), v(*b));
            let (n, k, m) = (at.rows(), at.cols(), bt.rows());
            if let Some(g) = acc(grads, nodes, *a) {
                matmul_into(gy, bt.data(), g, n, m, k);
            }
            if let Some(g) = acc(grads, nodes, *b) {
                for i in 0..n {
                    let a_row = &at.data()[i * k..(i + 1) * k];
                    for j in 0..m {
                        let s = gy[i * m + j];
                        if s != 0.0 {
                            axpy(s, a_row, &mut g[j * k..(j + 1) * k]);
                        }
                    }
                }
            }
        }
        Op::Relu(a) => {
            let av = v(*a).data();
            if let Some(g) = acc(grads, nodes, *a) {
                for i in 0..g.len() {
                    if av[i] > 0.0 {
                        g[i] += gy[i];
                    }
                }
            }
        }
        Op::Sigmoid(a) => {
            let yv = y.data();
            if let Some(g) = acc(grads, nodes, *a) {
                for i in 0..g.len() {
                    g[i] += gy[i] * yv[i] * (1.0 - yv[i]);
                }
            }
        }
        Op::InvSigmoid(a) => {
            let av = v(*a).data();
            if let Some(g) = acc(grads, nodes, *a) {
                for i in 0..g.len() {
                    let x = av[i];
                    if x > INV_SIGMOID_EPS && x < 1.0 - INV_SIGMOID_EPS {
                        g[i] += gy[i] / (x * (1.0 - x));
                    }
                }
            }
        }
        Op::Exp(a) => {
            let yv = y.data();
            if let Some(g) = acc(grads, nodes, *a) {
                for i in 0..g.len() {
                    g[i] += gy[i] * yv[i];
                }
            }
        }
        Op::Abs(a) => {
            let av = v(*a).data();
            if let Some(g) = acc(grads, nodes, *a) {
                for i in 0..g.len() {
                    if av[i] > 0.0 {
                        g[i] += gy[i];
                    } else if av[i] < 0.0 {
                        g[i] -= gy[i];
                    }
                }
            }
        }
        Op::Minimum(a, b) | Op::Maximum(a, b) => {
            let take_min = matches!(nodes[id].op, Op::Minimum(..));
            let (av, bv) = (v(*a).data(), v(*b).data());
            let pick_a: Vec<bool> = av
                .iter()
                .zip(bv)
                .map(|(x, z)| if take_min { x <= z } else { x >= z })
                .collect();
            if let Some(g) = acc(grads, nodes, *a) {
                for i in 0..g.len() {
                    if pick_a[i] {
                        g[i] += gy[i];
                    }
                }
            }
            if let Some(g) = acc(grads, nodes, *b) {
                for i in 0..g.len() {
                    if !pick_a[i] {
                        g[i] += gy[i];
                    }
                }
            }
        }
        Op::Clamp(a, lo, hi) => {
            let av = v(*a).data();
            if let Some(g) = acc(grads, nodes, *a) {
                for i in 0..g.len() {
                    if av[i] >= *lo && av[i] <= *hi {
                        g[i] += gy[i];
                    }
                }
            }
        }
        Op::SoftmaxRows(a) => {
            let m = y.cols();
            if let Some(g) = acc(grads, nodes, *a) {
                for ((yr, gr), out) in y.data().chunks(m).zip(gy.chunks(m)).zip(g.chunks_mut(m)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for j in 0..m {
                        out[j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
        }
        Op::LayerNormRows(a, eps) => {
            let x = v(*a);
            let m = x.cols();
            if let Some(g) = acc(grads, nodes, *a) {
                for ((xr, gr), out) in x.data().chunks(m).zip(gy.chunks(m)).zip(g.chunks_mut(m)) {
                    let mean = xr.iter().sum::<f64>() / m as f64;
                    let var = xr.iter().map(|u| (u - mean) * (u - mean)).sum::<f64>() / m as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let g_mean = gr.iter().sum::<f64>() / m as f64;
                    let gx_mean = xr
                        .iter()
                        .zip(gr)
                        .map(|(u, q)| (u - mean) * inv * q)
                        .sum::<f64>()
                        / m as f64;
                    for j in 0..m {
                        let xhat = (xr[j] - mean) * inv;
                        out[j] += inv * (gr[j] - g_mean - xhat * gx_mean);
                    }
                }
            }
        }
        Op::NarrowCols(a, start, len) => {
            let c = v(*a).cols();
            if let Some(g) = acc(grads, nodes, *a) {
                for (i, row) in gy.chunks(*len).enumerate() {
                    add_into(&mut g[i * c + start..i * c + start + len], row);
                }
            }
        }
        Op::ConcatCols(parts) => {
            let total = y.cols();
            let mut offset = 0;
            for &p in parts {
                let w = v(p).cols();
                if let Some(g) = acc(grads, nodes, p) {
                    for (i, row) in g.chunks_mut(w).enumerate() {
                        add_into(row, &gy[i * total + offset..i * total + offset + w]);
                    }
                }
                offset += w;
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let n = v(p).numel();
                if let Some(g) = acc(grads, nodes, p) {
                    add_into(g, &gy[offset..offset + n]);
                }
                offset += n;
            }
        }
        Op::Gather(a, idx) => {
            if let Some(g) = acc(grads, nodes, *a) {
                for (k, &i) in idx.iter().enumerate() {
                    g[i] += gy[k];
                }
            }
        }
        Op::Reshape(a) => {
            if let Some(g) = acc(grads, nodes, *a) {
                add_into(g, gy);
            }
        }
        Op::Sum(a) => {
            if let Some(g) = acc(grads, nodes, *a) {
                for d in g.iter_mut() {
                    *d += gy[0];
                }
            }
        }
        Op::LinearSample { x, t, valid } => {
            let xt = v(*x);
            let tt = v(*t);
            let (rows, c) = (xt.rows(), xt.cols());
            let span = rows.saturating_sub(1) as f64;
            let samples: Vec<Interp> = tt.data().iter().map(|&p| Interp::new(p, span, *valid)).collect();
            if let Some(g) = acc(grads, nodes, *x) {
                for (q, s) in samples.iter().enumerate() {
                    let gq = &gy[q * c..(q + 1) * c];
                    axpy(1.0 - s.w, gq, &mut g[s.i0 * c..(s.i0 + 1) * c]);
                    axpy(s.w, gq, &mut g[s.i1 * c..(s.i1 + 1) * c]);
                }
            }
            if let Some(g) = acc(grads, nodes, *t) {
                for (q, s) in samples.iter().enumerate() {
                    if s.inside {
                        let gq = &gy[q * c..(q + 1) * c];
                        let r0 = xt.row(s.i0);
                        let r1 = xt.row(s.i1);
                        let d: f64 = (0..c).map(|j| gq[j] * (r1[j] - r0[j])).sum();
                        g[q] += d * span;
                    }
                }
            }
        }
        Op::DeformSample {
            value,
            loc,
            attn,
            heads,
            valid,
        } => {
            let vt = v(*value);
            let (lt, wt) = (v(*loc), v(*attn));
            let (rows, c) = (vt.rows(), vt.cols());
            let span = rows.saturating_sub(1) as f64;
            let heads = *heads;
            let dh = c / heads;
            let mk = lt.cols();
            let k = mk / heads;
            let nq = lt.rows();
            let need_v = nodes[*value].needs_grad;
            let need_l = nodes[*loc].needs_grad;
            let need_a = nodes[*attn].needs_grad;
            let mut gv = if need_v { vec![0.0; vt.numel()] } else { Vec::new() };
            let mut gl = if need_l { vec![0.0; lt.numel()] } else { Vec::new() };
            let mut ga = if need_a { vec![0.0; wt.numel()] } else { Vec::new() };
            for q in 0..nq {
                for h in 0..heads {
                    let gq = &gy[q * c + h * dh..q * c + (h + 1) * dh];
                    for p in 0..k {
                        let col = h * k + p;
                        let a = wt.data()[q * mk + col];
                        let s = Interp::new(lt.data()[q * mk + col], span, *valid);
                        let r0 = &vt.data()[s.i0 * c + h * dh..s.i0 * c + (h + 1) * dh];
                        let r1 = &vt.data()[s.i1 * c + h * dh..s.i1 * c + (h + 1) * dh];
                        if need_a {
                            let mut d = 0.0;
                            for j in 0..dh {
                                d += gq[j] * ((1.0 - s.w) * r0[j] + s.w * r1[j]);
                            }
                            ga[q * mk + col] += d;
                        }
                        if need_l && s.inside {
                            let mut d = 0.0;
                            for j in 0..dh {
                                d += gq[j] * (r1[j] - r0[j]);
                            }
                            gl[q * mk + col] += a * d * span;
                        }
                        if need_v {
                            let b0 = s.i0 * c + h * dh;
                            let b1 = s.i1 * c + h * dh;
                            axpy(a * (1.0 - s.w), gq, &mut gv[b0..b0 + dh]);
                            axpy(a * s.w, gq, &mut gv[b1..b1 + dh]);
                        }
                    }
                }
            }
            if let Some(g) = acc(grads, nodes, *value) {
                add_into(g, &gv);
            }
            if let Some(g) = acc(grads, nodes, *loc) {
                add_into(g, &gl);
            }
            if let Some(g) = acc(grads, nodes, *attn) {
                add_into(g, &ga);
            }
        }
        Op::SigmoidFocal {
            logits,
            targets,
            alpha,
            gamma,
        } => {
            let lv = v(*logits).data();
            if let Some(g) = acc(grads, nodes, *logits) {
                for i in 0..g.len() {
                    let (_, d) = scalar::sigmoid_focal_with_grad(lv[i], targets[i], *alpha, *gamma);
                    g[i] += gy[i] * d;
                }
            }
        }
    }
}

/// Linear interpolation weights for a normalized position on a grid of
/// `span + 1` rows, of which only the first `valid` may be read.
#[derive(Clone, Copy, Debug)]
struct Interp {
    i0: usize,
    i1: usize,
    w: f64,
    inside: bool,
}

impl Interp {
    fn new(p: f64, span: f64, valid: usize) -> Self {
        let last = valid.saturating_sub(1) as f64;
        let raw = p * span;
        let pos = raw.clamp(0.0, last);
        let i0 = (pos.floor() as usize).min(valid.saturating_sub(1));
        let i1 = (i0 + 1).min(valid.saturating_sub(1));
        let w = if i1 == i0 { 0.0 } else { pos - i0 as f64 };
        Self {
            i0,
            i1,
            w,
            inside: raw >= 0.0 && raw <= last && i1 != i0,
        }
    }
}

fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// `c[n,m] += a[n,k] * b[k,m]`
fn matmul_into(a: &[f64], b: &[f64], c: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let c_row = &mut c[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip != 0.0 {
                axpy(aip, &b[p * m..(p + 1) * m], c_row);
            }
        }
    }
}

/// `c[n,m] += a[n,k] * b[m,k]^T`
fn matmul_nt_into(a: &[f64], b: &[f64], c: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..m {
            let b_row = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for p in 0..k {
                s += a_row[p] * b_row[p];
            }
            c[i * m + j] += s;
        }
    }
}

fn same_shape(op: &str, a: &Tensor, b: &Tensor) {
    assert!(
        a.shape() == b.shape(),
        "{op}: shape mismatch {:?} vs {:?}",
        a.shape(),
        b.shape()
    );
}

#[allow(clippy::should_implement_trait)]
impl<'g> Var<'g> {
    pub fn id(self) -> usize {
        self.id
    }

    pub fn graph(self) -> &'g Graph {
        self.graph
    }

    pub fn value(self) -> Arc<Tensor> {
        self.graph.val(self.id)
    }

    pub fn shape(self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn rows(self) -> usize {
        self.graph.nodes.borrow()[self.id].value.rows()
    }

    pub fn cols(self) -> usize {
        self.graph.nodes.borrow()[self.id].value.cols()
    }

    pub fn item(self) -> f64 {
        self.graph.nodes.borrow()[self.id].value.item()
    }

    /// Same value, cut from the gradient path.
    pub fn detach(self) -> Var<'g> {
        let v = self.value();
        self.graph.push_arc(v, Op::Leaf, false)
    }

    fn unary(self, op: Op, f: impl Fn(f64) -> f64) -> Var<'g> {
        let a = self.value();
        let data = a.data().iter().map(|&x| f(x)).collect();
        let t = Tensor::from_parts(a.shape().to_vec(), data);
        let needs = self.graph.needs(&[self.id]);
        self.graph.push(t, op, needs)
    }

    fn zip(self, other: Var<'g>, name: &str, op: Op, f: impl Fn(f64, f64) -> f64) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        same_shape(name, &a, &b);
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::from_parts(a.shape().to_vec(), data);
        let needs = self.graph.needs(&[self.id, other.id]);
        self.graph.push(t, op, needs)
    }

    pub fn add(self, o: Var<'g>) -> Var<'g> {
        self.zip(o, "add", Op::Add(self.id, o.id), |x, y| x + y)
    }

    pub fn sub(self, o: Var<'g>) -> Var<'g> {
        self.zip(o, "sub", Op::Sub(self.id, o.id), |x, y| x - y)
    }

    pub fn mul(self, o: Var<'g>) -> Var<'g> {
        self.zip(o, "mul", Op::Mul(self.id, o.id), |x, y| x * y)
    }

    pub fn div(self, o: Var<'g>) -> Var<'g> {
        self.zip(o, "div", Op::Div(self.id, o.id), |x, y| x / y)
    }

    pub fn minimum(self, o: Var<'g>) -> Var<'g> {
        self.zip(o, "minimum", Op::Minimum(self.id, o.id), |x, y| if x <= y { x } else { y })
    }

    pub fn maximum(self, o: Var<'g>) -> Var<'g> {
        self.zip(o, "maximum", Op::Maximum(self.id, o.id), |x, y| if x >= y { x } else { y })
    }

    /// `self[i, j] + row[j]`
    pub fn add_row(self, row: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), row.value());
        let m = b.numel();
        assert_eq!(a.cols(), m, "add_row: width mismatch");
        let data = a.data().iter().enumerate().map(|(i, x)| x + b.data()[i % m]).collect();
        let needs = self.graph.needs(&[self.id, row.id]);
        self.graph.push(
            Tensor::from_parts(a.shape().to_vec(), data),
            Op::AddRow(self.id, row.id),
            needs,
        )
    }

    /// `self[i, j] * row[j]`
    pub fn mul_row(self, row: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), row.value());
        let m = b.numel();
        assert_eq!(a.cols(), m, "mul_row: width mismatch");
        let data = a.data().iter().enumerate().map(|(i, x)| x * b.data()[i % m]).collect();
        let needs = self.graph.needs(&[self.id, row.id]);
        self.graph.push(
            Tensor::from_parts(a.shape().to_vec(), data),
            Op::MulRow(self.id, row.id),
            needs,
        )
    }

    /// `self[i, j] + col[i]`
    pub fn add_col(self, col: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), col.value());
        assert_eq!(a.rows(), b.numel(), "add_col: height mismatch");
        let m = a.cols();
        let data = a.data().iter().enumerate().map(|(i, x)| x + b.data()[i / m]).collect();
        let needs = self.graph.needs(&[self.id, col.id]);
        self.graph.push(
            Tensor::from_parts(a.shape().to_vec(), data),
            Op::AddCol(self.id, col.id),
            needs,
        )
    }

    /// `self[i, j] * col[i]`
    pub fn mul_col(self, col: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), col.value());
        assert_eq!(a.rows(), b.numel(), "mul_col: height mismatch");
        let m = a.cols();
        let data = a.data().iter().enumerate().map(|(i, x)| x * b.data()[i / m]).collect();
        let needs = self.graph.needs(&[self.id, col.id]);
        self.graph.push(
            Tensor::from_parts(a.shape().to_vec(), data),
            Op::MulCol(self.id, col.id),
            needs,
        )
    }

    pub fn scale(self, s: f64) -> Var<'g> {
        self.unary(Op::Scale(self.id, s), |x| x * s)
    }

    /// `a * self + b` for scalars; only the scale reaches the gradient.
    pub fn affine(self, a: f64, b: f64) -> Var<'g> {
        self.unary(Op::Scale(self.id, a), |x| a * x + b)
    }

    pub fn matmul(self, o: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), o.value());
        let (n, k, m) = (a.rows(), a.cols(), b.cols());
        assert_eq!(k, b.rows(), "matmul: inner dimension mismatch");
        let mut c = vec![0.0; n * m];
        matmul_into(a.data(), b.data(), &mut c, n, k, m);
        let needs = self.graph.needs(&[self.id, o.id]);
        self.graph
            .push(Tensor::from_parts(vec![n, m], c), Op::MatMul(self.id, o.id), needs)
    }

    /// `self * o^T`
    pub fn matmul_nt(self, o: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), o.value());
        let (n, k, m) = (a.rows(), a.cols(), b.rows());
        assert_eq!(k, b.cols(), "matmul_nt: inner dimension mismatch");
        let mut c = vec![0.0; n * m];
        matmul_nt_into(a.data(), b.data(), &mut c, n, k, m);
        let needs = self.graph.needs(&[self.id, o.id]);
        self.graph
            .push(Tensor::from_parts(vec![n, m], c), Op::MatMulNT(self.id, o.id), needs)
    }

    pub fn relu(self) -> Var<'g> {
        self.unary(Op::Relu(self.id), |x| x.max(0.0))
    }

    pub fn sigmoid(self) -> Var<'g> {
        self.unary(Op::Sigmoid(self.id), scalar::sigmoid)
    }

    /// Log-odds after clamping to `[1e-5, 1 - 1e-5]`.
    pub fn inverse_sigmoid(self) -> Var<'g> {
        self.unary(Op::InvSigmoid(self.id), scalar::inverse_sigmoid)
    }

    pub fn exp(self) -> Var<'g> {
        self.unary(Op::Exp(self.id), f64::exp)
    }

    pub fn abs(self) -> Var<'g> {
        self.unary(Op::Abs(self.id), f64::abs)
    }

    pub fn clamp(self, lo: f64, hi: f64) -> Var<'g> {
        self.unary(Op::Clamp(self.id, lo, hi), |x| x.clamp(lo, hi))
    }

    pub fn softmax_rows(self) -> Var<'g> {
        let a = self.value();
        let m = a.cols();
        let mut data = a.data().to_vec();
        for row in data.chunks_mut(m) {
            scalar::softmax_in_place(row);
        }
        let needs = self.graph.needs(&[self.id]);
        self.graph.push(
            Tensor::from_parts(a.shape().to_vec(), data),
            Op::SoftmaxRows(self.id),
            needs,
        )
    }

    /// Per-row standardization without affine terms.
    pub fn layer_norm_rows(self, eps: f64) -> Var<'g> {
        let a = self.value();
        let m = a.cols();
        let mut data = a.data().to_vec();
        for row in data.chunks_mut(m) {
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|u| (u - mean) * (u - mean)).sum::<f64>() / m as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for u in row.iter_mut() {
                *u = (*u - mean) * inv;
            }
        }
        let needs = self.graph.needs(&[self.id]);
        self.graph.push(
            Tensor::from_parts(a.shape().to_vec(), data),
            Op::LayerNormRows(self.id, eps),
            needs,
        )
    }

    pub fn narrow_cols(self, start: usize, len: usize) -> Var<'g> {
        let a = self.value();
        let t = a.narrow_cols(start, len);
        let needs = self.graph.needs(&[self.id]);
        self.graph.push(t, Op::NarrowCols(self.id, start, len), needs)
    }

    pub fn concat_cols(parts: &[Var<'g>]) -> Var<'g> {
        let g = parts[0].graph;
        let vals: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor> = vals.iter().map(|a| a.as_ref()).collect();
        let t = Tensor::concat_cols(&refs).expect("concat_cols: row mismatch");
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let needs = g.needs(&ids);
        g.push(t, Op::ConcatCols(ids), needs)
    }

    /// Stacks along the leading dimension. Trailing sizes must agree.
    pub fn concat_rows(parts: &[Var<'g>]) -> Var<'g> {
        let g = parts[0].graph;
        let vals: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let tail: Vec<usize> = vals[0].shape()[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for v in &vals {
            assert_eq!(&v.shape()[1..], tail.as_slice(), "concat_rows: trailing shape mismatch");
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let needs = g.needs(&ids);
        g.push(Tensor::from_parts(shape, data), Op::ConcatRows(ids), needs)
    }

    /// Flat-index gather into a tensor of the given shape.
    pub fn gather(self, idx: Vec<usize>, shape: &[usize]) -> Var<'g> {
        let a = self.value();
        assert_eq!(idx.len(), shape.iter().product::<usize>(), "gather: shape mismatch");
        let data = idx.iter().map(|&i| a.data()[i]).collect();
        let needs = self.graph.needs(&[self.id]);
        self.graph
            .push(Tensor::from_parts(shape.to_vec(), data), Op::Gather(self.id, idx), needs)
    }

    /// Selects rows of a 2-D (or 1-D) tensor.
    pub fn index_rows(self, rows: &[usize]) -> Var<'g> {
        let shape = self.shape();
        let c = self.cols();
        let mut idx = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            idx.extend(r * c..(r + 1) * c);
        }
        let mut out_shape = shape.clone();
        out_shape[0] = rows.len();
        self.gather(idx, &out_shape)
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'g> {
        let a = self.value();
        let t = (*a).clone().reshaped(shape).expect("reshape: element count mismatch");
        let needs = self.graph.needs(&[self.id]);
        self.graph.push(t, Op::Reshape(self.id), needs)
    }

    pub fn sum(self) -> Var<'g> {
        let s = self.value().data().iter().sum();
        let needs = self.graph.needs(&[self.id]);
        self.graph.push(Tensor::scalar(s), Op::Sum(self.id), needs)
    }

    /// Interpolated rows of `self` (`[T, C]`) at normalized positions
    /// `t` (`[Q]`). Position `p` maps to row index `p * (T - 1)`; indices are
    /// clamped to the first `valid` rows.
    pub fn linear_sample(self, t: Var<'g>, valid: usize) -> Var<'g> {
        let x = self.value();
        let tt = t.value();
        let (rows, c) = (x.rows(), x.cols());
        assert!(valid >= 1 && valid <= rows, "linear_sample: bad valid length");
        let span = (rows - 1) as f64;
        let mut data = Vec::with_capacity(tt.numel() * c);
        for &p in tt.data() {
            let s = Interp::new(p, span, valid);
            let (r0, r1) = (x.row(s.i0), x.row(s.i1));
            data.extend((0..c).map(|j| (1.0 - s.w) * r0[j] + s.w * r1[j]));
        }
        let needs = self.graph.needs(&[self.id, t.id]);
        self.graph.push(
            Tensor::from_parts(vec![tt.numel(), c], data),
            Op::LinearSample {
                x: self.id,
                t: t.id,
                valid,
            },
            needs,
        )
    }

    /// Multi-head weighted sampling: `self` is the projected value map
    /// `[T, C]`, `loc` and `attn` are `[Q, heads * K]` normalized sampling
    /// positions and weights. Head `h` reads columns `h*C/heads..`.
    pub fn deform_sample(self, loc: Var<'g>, attn: Var<'g>, heads: usize, valid: usize) -> Var<'g> {
        let vt = self.value();
        let (lt, wt) = (loc.value(), attn.value());
        let (rows, c) = (vt.rows(), vt.cols());
        assert!(valid >= 1 && valid <= rows, "deform_sample: bad valid length");
        assert_eq!(c % heads, 0, "deform_sample: channels not divisible by heads");
        assert_eq!(lt.shape(), wt.shape(), "deform_sample: loc/attn shape mismatch");
        let dh = c / heads;
        let (nq, mk) = (lt.rows(), lt.cols());
        assert_eq!(mk % heads, 0, "deform_sample: points not divisible by heads");
        let k = mk / heads;
        let span = (rows - 1) as f64;
        let mut out = vec![0.0; nq * c];
        for q in 0..nq {
            for h in 0..heads {
                let o = &mut out[q * c + h * dh..q * c + (h + 1) * dh];
                for p in 0..k {
                    let col = h * k + p;
                    let a = wt.data()[q * mk + col];
                    let s = Interp::new(lt.data()[q * mk + col], span, valid);
                    let r0 = &vt.data()[s.i0 * c + h * dh..s.i0 * c + (h + 1) * dh];
                    let r1 = &vt.data()[s.i1 * c + h * dh..s.i1 * c + (h + 1) * dh];
                    axpy(a * (1.0 - s.w), r0, o);
                    axpy(a * s.w, r1, o);
                }
            }
        }
        let needs = self.graph.needs(&[self.id, loc.id, attn.id]);
        self.graph.push(
            Tensor::from_parts(vec![nq, c], out),
            Op::DeformSample {
                value: self.id,
                loc: loc.id,
                attn: attn.id,
                heads,
                valid,
            },
            needs,
        )
    }

    /// Elementwise sigmoid focal loss of logits against binary targets.
    pub fn sigmoid_focal(self, targets: Vec<bool>, alpha: f64, gamma: f64) -> Var<'g> {
        let a = self.value();
        assert_eq!(a.numel(), targets.len(), "sigmoid_focal: target count mismatch");
        let data = a
            .data()
            .iter()
            .zip(&targets)
            .map(|(&x, &t)| scalar::sigmoid_focal_with_grad(x, t, alpha, gamma).0)
            .collect();
        let needs = self.graph.needs(&[self.id]);
        self.graph.push(
            Tensor::from_parts(a.shape().to_vec(), data),
            Op::SigmoidFocal {
                logits: self.id,
                targets,
                alpha,
                gamma,
            },
            needs,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn square_gradient() {
        let g = Graph::new();
        let x = g.variable(Tensor::scalar(3.0));
        let y = x.mul(x);
        let grads = g.backward(y).unwrap();
        assert_eq!(y.item(), 9.0);
        assert_eq!(grads.wrt(x).unwrap().item(), 6.0);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let g = Graph::new();
        let x = g.variable(Tensor::vector(vec![1.0, 2.0]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn linear_sample_grid_points_and_midpoint() {
        let g = Graph::new();
        let x = g.constant(t2(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0], &[7.0, 8.0]]));
        let t = g.constant(Tensor::vector(vec![1.0 / 3.0]));
        let y = x.linear_sample(t, 4).value();
        assert!((y.data()[0] - 3.0).abs() < 1e-12 && (y.data()[1] - 4.0).abs() < 1e-12);

        let x2 = g.constant(t2(&[&[0.0, 2.0], &[4.0, 6.0]]));
        let y2 = x2.linear_sample(g.constant(Tensor::vector(vec![0.5])), 2).value();
        assert_eq!(y2.data(), &[2.0, 4.0]);
    }

    #[test]
    fn linear_sample_clamps_out_of_range() {
        let g = Graph::new();
        let x = g.constant(t2(&[&[1.0], &[2.0], &[3.0]]));
        let y = x.linear_sample(g.constant(Tensor::vector(vec![1.4, -0.3])), 3).value();
        assert_eq!(y.data(), &[3.0, 1.0]);
    }

    #[test]
    fn linear_sample_respects_valid_rows() {
        let g = Graph::new();
        let x = g.constant(t2(&[&[1.0], &[2.0], &[3.0], &[0.0]]));
        // index 3.0 lies in the padded row; clamped to the last valid row
        let y = x.linear_sample(g.constant(Tensor::vector(vec![1.0])), 3).value();
        assert_eq!(y.data(), &[3.0]);
    }

    #[test]
    fn linear_sample_is_piecewise_linear() {
        let g = Graph::new();
        let x = g.constant(t2(&[&[1.0, -1.0], &[2.0, 5.0], &[-3.0, 0.5], &[4.0, 4.0]]));
        for &(a, w) in &[(0usize, 0.25f64), (1, 0.5), (2, 0.75)] {
            let p = (a as f64 + w) / 3.0;
            let y = x.linear_sample(g.constant(Tensor::vector(vec![p])), 4).value();
            let xv = x.value();
            for j in 0..2 {
                let expect = (1.0 - w) * xv.get2(a, j) + w * xv.get2(a + 1, j);
                assert!((y.data()[j] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn param_nodes_are_shared_and_accumulate() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::vector(vec![2.0]));
        let g = Graph::with_params(&store);
        let a = g.param(w);
        let b = g.param(w);
        assert_eq!(a.id(), b.id());
        let y = a.mul(b).add(a).sum();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.param(w).unwrap().item(), 5.0);
    }

    #[test]
    fn detach_blocks_gradient() {
        let g = Graph::new();
        let x = g.variable(Tensor::scalar(2.0));
        let y = x.mul(x.detach()).sum();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.wrt(x).unwrap().item(), 2.0);
    }
}
