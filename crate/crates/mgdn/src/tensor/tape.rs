//! Wengert tape: operations recorded during the forward pass are replayed in
//! reverse to accumulate vector-Jacobian products.
//!
//! The tape owns every intermediate buffer. Handles ([`Var`]) are plain
//! indices, so graph construction is define-by-run: recording decisions may
//! depend on forward values (e.g. degenerate-histogram fallbacks).

use std::sync::Arc;

use crate::error::{MgdnError, Result};
use crate::tensor::{ops, par, Tensor};

/// Handle to a tape value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

pub(crate) struct Value {
    pub data: Vec<f64>,
    pub shape: Vec<usize>,
}

/// Matrix product operand layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatMode {
    /// `out = a · b`
    NN,
    /// `out = aᵀ · b`
    TN,
    /// `out = a · bᵀ`
    NT,
}

/// Dimensions of a batched matrix product producing `[batch, m, n]`.
#[derive(Debug, Clone, Copy)]
pub struct MatSpec {
    pub mode: MatMode,
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvDims {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad: Padding,
}

pub(crate) enum Node {
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        out: Var,
        dims: ConvDims,
    },
    DepthwiseConv2d {
        x: Var,
        w: Var,
        out: Var,
        h: usize,
        wd: usize,
        c: usize,
        k: usize,
    },
    DynamicFilter {
        x: Var,
        kv: Var,
        out: Var,
        h: usize,
        wd: usize,
        c: usize,
        k: usize,
    },
    Matmul {
        a: Var,
        b: Var,
        out: Var,
        spec: MatSpec,
    },
    Softmax {
        x: Var,
        out: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        out: Var,
        rows: usize,
        c: usize,
        /// Per row: (mean, 1/sqrt(var + eps)), interleaved.
        saved: Vec<f64>,
    },
    Sigmoid {
        x: Var,
        out: Var,
    },
    Exp {
        x: Var,
        out: Var,
    },
    Abs {
        x: Var,
        out: Var,
    },
    Add {
        a: Var,
        b: Var,
        out: Var,
    },
    Sub {
        a: Var,
        b: Var,
        out: Var,
    },
    Mul {
        a: Var,
        b: Var,
        out: Var,
    },
    Div {
        a: Var,
        b: Var,
        out: Var,
    },
    Affine {
        x: Var,
        out: Var,
        mul: f64,
    },
    MulScalar {
        x: Var,
        s: Var,
        out: Var,
    },
    SumAxis {
        x: Var,
        out: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    BroadcastAxis {
        x: Var,
        out: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Concat {
        xs: Vec<Var>,
        out: Var,
        rows: usize,
        widths: Vec<usize>,
    },
    Slice {
        x: Var,
        out: Var,
        rows: usize,
        width: usize,
        from: usize,
        take: usize,
    },
    Gather {
        x: Var,
        out: Var,
        idx: Arc<Vec<usize>>,
    },
    Entropy {
        p: Var,
        out: Var,
        eps: f64,
    },
    MuLaw {
        x: Var,
        out: Var,
        mu: f64,
    },
    SoftJointHist {
        t1: Var,
        t2: Var,
        out: Var,
        bins: usize,
        centers1: Vec<f64>,
        centers2: Vec<f64>,
        sigma1: f64,
        sigma2: f64,
        /// Per-pixel bin weights, n x bins each.
        w1: Vec<f64>,
        w2: Vec<f64>,
    },
}

/// Reverse-mode tape. One forward pass per tape; leaf gradients accumulate
/// across repeated `backward` calls until [`Tape::reset_grads`].
#[derive(Default)]
pub struct Tape {
    pub(crate) vals: Vec<Value>,
    pub(crate) nodes: Vec<Node>,
    pub(crate) grads: Vec<Option<Vec<f64>>>,
    pub(crate) requires: Vec<bool>,
    pub(crate) leaves: Vec<bool>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn leaf(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Var {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        let v = self.push_value(data, shape, requires_grad);
        self.leaves[v.0] = true;
        v
    }

    /// Leaf taking shape and `requires_grad` from a tensor.
    pub fn leaf_tensor(&mut self, t: &Tensor) -> Var {
        self.leaf(t.data().to_vec(), t.shape().to_vec(), t.requires_grad())
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, data: Vec<f64>, shape: Vec<usize>) -> Var {
        self.leaf(data, shape, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(vec![v], vec![1])
    }

    pub(crate) fn push_value(&mut self, data: Vec<f64>, shape: Vec<usize>, requires: bool) -> Var {
        let id = self.vals.len();
        self.vals.push(Value { data, shape });
        self.grads.push(None);
        self.requires.push(requires);
        self.leaves.push(false);
        Var(id)
    }

    pub(crate) fn push_node(&mut self, node: Node) {
        self.nodes.push(node);
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.vals[v.0].shape
    }

    pub fn numel(&self, v: Var) -> usize {
        self.vals[v.0].data.len()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.vals[v.0].data
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor::from_vec(self.vals[v.0].shape.clone(), self.vals[v.0].data.clone())
            .expect("tape value is internally consistent")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn reset_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    /// Replays the tape in reverse from a scalar loss. Fresh flow gradients
    /// are used for intermediates each pass; leaf gradients persist and
    /// accumulate additively across passes.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.numel(loss) != 1 {
            return Err(MgdnError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut flow: Vec<Option<Vec<f64>>> = vec![None; self.vals.len()];
        flow[loss.0] = Some(vec![1.0]);
        let Tape {
            vals,
            nodes,
            requires,
            ..
        } = self;
        for node in nodes.iter().rev() {
            let out = node_out(node);
            // Take the output gradient to sidestep aliasing; restore after.
            let Some(gout) = flow[out.0].take() else {
                continue;
            };
            backward_node(node, vals, &mut flow, requires, &gout);
            flow[out.0] = Some(gout);
        }
        for (i, g) in flow.into_iter().enumerate() {
            if let Some(g) = g {
                if self.leaves[i] && self.requires[i] {
                    add_grad(&mut self.grads, Var(i), g);
                }
            }
        }
        Ok(())
    }
}

fn node_out(node: &Node) -> Var {
    match node {
        Node::Conv2d { out, .. }
        | Node::DepthwiseConv2d { out, .. }
        | Node::DynamicFilter { out, .. }
        | Node::Matmul { out, .. }
        | Node::Softmax { out, .. }
        | Node::LayerNorm { out, .. }
        | Node::Sigmoid { out, .. }
        | Node::Exp { out, .. }
        | Node::Abs { out, .. }
        | Node::Add { out, .. }
        | Node::Sub { out, .. }
        | Node::Mul { out, .. }
        | Node::Div { out, .. }
        | Node::Affine { out, .. }
        | Node::MulScalar { out, .. }
        | Node::SumAxis { out, .. }
        | Node::BroadcastAxis { out, .. }
        | Node::Concat { out, .. }
        | Node::Slice { out, .. }
        | Node::Gather { out, .. }
        | Node::Entropy { out, .. }
        | Node::MuLaw { out, .. }
        | Node::SoftJointHist { out, .. } => *out,
    }
}

fn add_grad(grads: &mut [Option<Vec<f64>>], id: Var, delta: Vec<f64>) {
    match &mut grads[id.0] {
        Some(g) => {
            for (gi, di) in g.iter_mut().zip(&delta) {
                *gi += di;
            }
        }
        slot => *slot = Some(delta),
    }
}

/// Accumulates without allocating when a buffer already exists.
fn add_grad_slice(grads: &mut [Option<Vec<f64>>], id: Var, delta: &[f64]) {
    match &mut grads[id.0] {
        Some(g) => {
            for (gi, di) in g.iter_mut().zip(delta) {
                *gi += di;
            }
        }
        slot => *slot = Some(delta.to_vec()),
    }
}

#[allow(clippy::too_many_lines)]
fn backward_node(
    node: &Node,
    vals: &[Value],
    grads: &mut [Option<Vec<f64>>],
    requires: &[bool],
    gout: &[f64],
) {
    let val = |v: Var| -> &[f64] { &vals[v.0].data };
    match node {
        Node::Conv2d { x, w, b, dims, .. } => {
            let d = *dims;
            if requires[x.0] {
                add_grad(grads, *x, ops::conv2d_back_input(gout, val(*w), d));
            }
            if requires[w.0] {
                add_grad(grads, *w, ops::conv2d_back_weight(gout, val(*x), d));
            }
            if requires[b.0] {
                let (oh, ow) = ops::conv_out_size(d);
                let mut db = vec![0.0; d.cout];
                for p in 0..oh * ow {
                    for (co, dst) in db.iter_mut().enumerate() {
                        *dst += gout[p * d.cout + co];
                    }
                }
                add_grad(grads, *b, db);
            }
        }
        Node::DepthwiseConv2d {
            x, w, h, wd, c, k, ..
        } => {
            let (h, wd, c, k) = (*h, *wd, *c, *k);
            if requires[x.0] {
                add_grad(grads, *x, ops::depthwise_back_input(gout, val(*w), h, wd, c, k));
            }
            if requires[w.0] {
                add_grad(grads, *w, ops::depthwise_back_weight(gout, val(*x), h, wd, c, k));
            }
        }
        Node::DynamicFilter {
            x, kv, h, wd, c, k, ..
        } => {
            let (h, wd, c, k) = (*h, *wd, *c, *k);
            if requires[x.0] {
                add_grad(grads, *x, ops::dynfilter_back_input(gout, val(*kv), h, wd, c, k));
            }
            if requires[kv.0] {
                add_grad(grads, *kv, ops::dynfilter_back_kernels(gout, val(*x), h, wd, c, k));
            }
        }
        Node::Matmul { a, b, spec, .. } => {
            let s = *spec;
            // VJPs are themselves matrix products in a complementary mode.
            let (da_spec, db_spec) = match s.mode {
                MatMode::NN => (
                    MatSpec { mode: MatMode::NT, batch: s.batch, m: s.m, k: s.n, n: s.k },
                    MatSpec { mode: MatMode::TN, batch: s.batch, m: s.k, k: s.m, n: s.n },
                ),
                MatMode::TN => (
                    MatSpec { mode: MatMode::NT, batch: s.batch, m: s.k, k: s.n, n: s.m },
                    MatSpec { mode: MatMode::NN, batch: s.batch, m: s.k, k: s.m, n: s.n },
                ),
                MatMode::NT => (
                    MatSpec { mode: MatMode::NN, batch: s.batch, m: s.m, k: s.n, n: s.k },
                    MatSpec { mode: MatMode::TN, batch: s.batch, m: s.n, k: s.m, n: s.k },
                ),
            };
            if requires[a.0] {
                let da = match s.mode {
                    MatMode::NN => ops::matmul_raw(da_spec, gout, val(*b)),
                    MatMode::TN => ops::matmul_raw(da_spec, val(*b), gout),
                    MatMode::NT => ops::matmul_raw(da_spec, gout, val(*b)),
                };
                add_grad(grads, *a, da);
            }
            if requires[b.0] {
                let db = match s.mode {
                    MatMode::NN => ops::matmul_raw(db_spec, val(*a), gout),
                    MatMode::TN => ops::matmul_raw(db_spec, val(*a), gout),
                    MatMode::NT => ops::matmul_raw(db_spec, gout, val(*a)),
                };
                add_grad(grads, *b, db);
            }
        }
        Node::Softmax {
            x,
            out,
            outer,
            len,
            inner,
            ..
        } => {
            if !requires[x.0] {
                return;
            }
            let y = val(*out);
            let mut dx = vec![0.0; y.len()];
            for o in 0..*outer {
                for i in 0..*inner {
                    let mut dot = 0.0;
                    for l in 0..*len {
                        let idx = (o * len + l) * inner + i;
                        dot += gout[idx] * y[idx];
                    }
                    for l in 0..*len {
                        let idx = (o * len + l) * inner + i;
                        dx[idx] = y[idx] * (gout[idx] - dot);
                    }
                }
            }
            add_grad(grads, *x, dx);
        }
        Node::LayerNorm {
            x,
            gamma,
            beta,
            rows,
            c,
            saved,
            ..
        } => {
            let (rows, c) = (*rows, *c);
            let xs = val(*x);
            let g = val(*gamma);
            if requires[beta.0] {
                let mut db = vec![0.0; c];
                for r in 0..rows {
                    for j in 0..c {
                        db[j] += gout[r * c + j];
                    }
                }
                add_grad(grads, *beta, db);
            }
            if requires[gamma.0] {
                let mut dg = vec![0.0; c];
                for r in 0..rows {
                    let (mu, inv) = (saved[2 * r], saved[2 * r + 1]);
                    for j in 0..c {
                        let xhat = (xs[r * c + j] - mu) * inv;
                        dg[j] += gout[r * c + j] * xhat;
                    }
                }
                add_grad(grads, *gamma, dg);
            }
            if requires[x.0] {
                let mut dx = vec![0.0; xs.len()];
                for r in 0..rows {
                    let (mu, inv) = (saved[2 * r], saved[2 * r + 1]);
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..c {
                        let xhat = (xs[r * c + j] - mu) * inv;
                        let h = gout[r * c + j] * g[j];
                        m1 += h;
                        m2 += h * xhat;
                    }
                    m1 /= c as f64;
                    m2 /= c as f64;
                    for j in 0..c {
                        let xhat = (xs[r * c + j] - mu) * inv;
                        let h = gout[r * c + j] * g[j];
                        dx[r * c + j] = inv * (h - m1 - xhat * m2);
                    }
                }
                add_grad(grads, *x, dx);
            }
        }
        Node::Sigmoid { x, out } => {
            if requires[x.0] {
                let y = val(*out);
                let dx = gout
                    .iter()
                    .zip(y)
                    .map(|(d, yi)| d * yi * (1.0 - yi))
                    .collect();
                add_grad(grads, *x, dx);
            }
        }
        Node::Exp { x, out } => {
            if requires[x.0] {
                let y = val(*out);
                let dx = gout.iter().zip(y).map(|(d, yi)| d * yi).collect();
                add_grad(grads, *x, dx);
            }
        }
        Node::Abs { x, .. } => {
            if requires[x.0] {
                let xs = val(*x);
                let dx = gout
                    .iter()
                    .zip(xs)
                    .map(|(d, xi)| {
                        if *xi > 0.0 {
                            *d
                        } else if *xi < 0.0 {
                            -*d
                        } else {
                            0.0
                        }
                    })
                    .collect();
                add_grad(grads, *x, dx);
            }
        }
        Node::Add { a, b, .. } => {
            if requires[a.0] {
                add_grad_slice(grads, *a, gout);
            }
            if requires[b.0] {
                add_grad_slice(grads, *b, gout);
            }
        }
        Node::Sub { a, b, .. } => {
            if requires[a.0] {
                add_grad_slice(grads, *a, gout);
            }
            if requires[b.0] {
                add_grad(grads, *b, gout.iter().map(|d| -d).collect());
            }
        }
        Node::Mul { a, b, .. } => {
            if requires[a.0] {
                let bv = val(*b);
                add_grad(grads, *a, gout.iter().zip(bv).map(|(d, v)| d * v).collect());
            }
            if requires[b.0] {
                let av = val(*a);
                add_grad(grads, *b, gout.iter().zip(av).map(|(d, v)| d * v).collect());
            }
        }
        Node::Div { a, b, .. } => {
            let bv = val(*b);
            if requires[a.0] {
                add_grad(grads, *a, gout.iter().zip(bv).map(|(d, v)| d / v).collect());
            }
            if requires[b.0] {
                let av = val(*a);
                let db = gout
                    .iter()
                    .zip(av.iter().zip(bv))
                    .map(|(d, (ai, bi))| -d * ai / (bi * bi))
                    .collect();
                add_grad(grads, *b, db);
            }
        }
        Node::Affine { x, mul, .. } => {
            if requires[x.0] {
                add_grad(grads, *x, gout.iter().map(|d| d * mul).collect());
            }
        }
        Node::MulScalar { x, s, .. } => {
            let sv = val(*s)[0];
            if requires[x.0] {
                add_grad(grads, *x, gout.iter().map(|d| d * sv).collect());
            }
            if requires[s.0] {
                let xs = val(*x);
                let ds: f64 = gout.iter().zip(xs).map(|(d, xi)| d * xi).sum();
                add_grad(grads, *s, vec![ds]);
            }
        }
        Node::SumAxis {
            x,
            outer,
            len,
            inner,
            ..
        } => {
            if requires[x.0] {
                let mut dx = vec![0.0; outer * len * inner];
                for o in 0..*outer {
                    for l in 0..*len {
                        for i in 0..*inner {
                            dx[(o * len + l) * inner + i] = gout[o * inner + i];
                        }
                    }
                }
                add_grad(grads, *x, dx);
            }
        }
        Node::BroadcastAxis {
            x,
            outer,
            len,
            inner,
            ..
        } => {
            if requires[x.0] {
                let mut dx = vec![0.0; outer * inner];
                for o in 0..*outer {
                    for l in 0..*len {
                        for i in 0..*inner {
                            dx[o * inner + i] += gout[(o * len + l) * inner + i];
                        }
                    }
                }
                add_grad(grads, *x, dx);
            }
        }
        Node::Concat {
            xs, rows, widths, ..
        } => {
            let total: usize = widths.iter().sum();
            let mut off = 0;
            for (xv, wdt) in xs.iter().zip(widths) {
                if requires[xv.0] {
                    let mut dx = vec![0.0; rows * wdt];
                    for r in 0..*rows {
                        dx[r * wdt..(r + 1) * wdt]
                            .copy_from_slice(&gout[r * total + off..r * total + off + wdt]);
                    }
                    add_grad(grads, *xv, dx);
                }
                off += wdt;
            }
        }
        Node::Slice {
            x,
            rows,
            width,
            from,
            take,
            ..
        } => {
            if requires[x.0] {
                let mut dx = vec![0.0; rows * width];
                for r in 0..*rows {
                    dx[r * width + from..r * width + from + take]
                        .copy_from_slice(&gout[r * take..(r + 1) * take]);
                }
                add_grad(grads, *x, dx);
            }
        }
        Node::Gather { x, idx, .. } => {
            if requires[x.0] {
                let mut dx = vec![0.0; vals[x.0].data.len()];
                for (o, &src) in idx.iter().enumerate() {
                    if src != usize::MAX {
                        dx[src] += gout[o];
                    }
                }
                add_grad(grads, *x, dx);
            }
        }
        Node::Entropy { p, eps, .. } => {
            if requires[p.0] {
                let ps = val(*p);
                let g = gout[0];
                let dp = ps
                    .iter()
                    .map(|&pi| {
                        if pi >= *eps {
                            g * (-pi.ln() - 1.0)
                        } else {
                            g * -eps.ln()
                        }
                    })
                    .collect();
                add_grad(grads, *p, dp);
            }
        }
        Node::MuLaw { x, mu, .. } => {
            if requires[x.0] {
                let xs = val(*x);
                let denom = (1.0 + mu).ln();
                let dx = gout
                    .iter()
                    .zip(xs)
                    .map(|(d, &xi)| {
                        if xi > 0.0 {
                            d * mu / ((1.0 + mu * xi) * denom)
                        } else {
                            0.0
                        }
                    })
                    .collect();
                add_grad(grads, *x, dx);
            }
        }
        Node::SoftJointHist {
            t1,
            t2,
            bins,
            centers1,
            centers2,
            sigma1,
            sigma2,
            w1,
            w2,
            ..
        } => {
            let b = *bins;
            let n = vals[t1.0].data.len();
            let inv_n = 1.0 / n as f64;
            if requires[t1.0] {
                let ts = val(*t1);
                let mut dt = vec![0.0; n];
                par::par_rows(&mut dt, n, 1, |range, block| {
                    for (i, p) in range.enumerate() {
                        block[i] = soft_hist_pixel_grad(
                            gout, w1, w2, ts[p], centers1, *sigma1, b, p, false,
                        ) * inv_n;
                    }
                });
                add_grad(grads, *t1, dt);
            }
            if requires[t2.0] {
                let ts = val(*t2);
                let mut dt = vec![0.0; n];
                par::par_rows(&mut dt, n, 1, |range, block| {
                    for (i, p) in range.enumerate() {
                        block[i] = soft_hist_pixel_grad(
                            gout, w2, w1, ts[p], centers2, *sigma2, b, p, true,
                        ) * inv_n;
                    }
                });
                add_grad(grads, *t2, dt);
            }
        }
    }
}

/// Gradient of the joint soft histogram w.r.t. one pixel of one input.
///
/// `w_self` are the differentiated input's bin weights, `w_other` the other
/// input's. With `transposed = false` the self axis indexes rows of the
/// joint table, otherwise columns.
#[allow(clippy::too_many_arguments)]
fn soft_hist_pixel_grad(
    gout: &[f64],
    w_self: &[f64],
    w_other: &[f64],
    t: f64,
    centers: &[f64],
    sigma: f64,
    bins: usize,
    pixel: usize,
    transposed: bool,
) -> f64 {
    let ws = &w_self[pixel * bins..(pixel + 1) * bins];
    let wo = &w_other[pixel * bins..(pixel + 1) * bins];
    let inv_s2 = 1.0 / (sigma * sigma);
    // Upstream sensitivity of each self bin: v_a = sum_b g[a,b] * wo_b.
    // Softmax-weight Jacobian: dws_a/dt = ws_a * (g_a - sum_c ws_c g_c),
    // with logit slope g_a = (c_a - t) / sigma^2.
    let mut s = 0.0;
    for (a, &w) in ws.iter().enumerate() {
        s += w * (centers[a] - t) * inv_s2;
    }
    let mut d = 0.0;
    for a in 0..bins {
        let v: f64 = if transposed {
            (0..bins).map(|b| gout[b * bins + a] * wo[b]).sum()
        } else {
            (0..bins).map(|b| gout[a * bins + b] * wo[b]).sum()
        };
        let slope = (centers[a] - t) * inv_s2;
        d += v * ws[a] * (slope - s);
    }
    d
}
