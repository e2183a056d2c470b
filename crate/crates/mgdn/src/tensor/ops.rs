//! Differentiable operations over tape values.
//!
//! Each helper validates shapes, computes the forward result eagerly and
//! records a node with everything the backward pass needs. Raw kernels are
//! shared between forward and backward where the VJP is itself the same kind
//! of computation (matrix products, convolutions).

use std::sync::Arc;

use crate::error::{MgdnError, Result};
use crate::tensor::par;
use crate::tensor::tape::{ConvDims, MatMode, MatSpec, Node, Padding, Tape, Var};

// Elementwise ops act on flat data; matching element counts is the real
// contract (scalars in particular show up both as [1] and [1, 1]).
fn same_numel(op: &'static str, tape: &Tape, a: Var, b: Var) -> Result<()> {
    if tape.numel(a) != tape.numel(b) {
        return Err(MgdnError::shape(
            op,
            format!("{:?} vs {:?}", tape.shape(a), tape.shape(b)),
        ));
    }
    Ok(())
}

pub(crate) fn conv_out_size(d: ConvDims) -> (usize, usize) {
    match d.pad {
        Padding::Same => (d.h, d.w),
        Padding::Valid => (d.h + 1 - d.kh, d.w + 1 - d.kw),
    }
}

fn pad_offsets(d: ConvDims) -> (usize, usize) {
    match d.pad {
        Padding::Same => (d.kh / 2, d.kw / 2),
        Padding::Valid => (0, 0),
    }
}

/// 2-D convolution (cross-correlation) over an `[H, W, Cin]` tensor with a
/// `[kh, kw, Cin, Cout]` kernel and `[Cout]` bias. `Same` padding zero-fills.
pub fn conv2d(tape: &mut Tape, x: Var, w: Var, b: Var, pad: Padding) -> Result<Var> {
    let xs = tape.shape(x).to_vec();
    let ws = tape.shape(w).to_vec();
    if xs.len() != 3 || ws.len() != 4 {
        return Err(MgdnError::shape(
            "conv2d",
            format!("input {:?} kernel {:?}; want [H,W,Cin] and [kh,kw,Cin,Cout]", xs, ws),
        ));
    }
    let (h, wd, cin) = (xs[0], xs[1], xs[2]);
    let (kh, kw, wcin, cout) = (ws[0], ws[1], ws[2], ws[3]);
    if wcin != cin {
        return Err(MgdnError::shape(
            "conv2d",
            format!("input has {cin} channels but kernel expects {wcin} (kernel {:?})", ws),
        ));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(MgdnError::shape("conv2d", format!("kernel extents must be odd, got {kh}x{kw}")));
    }
    if tape.shape(b) != [cout] {
        return Err(MgdnError::shape(
            "conv2d",
            format!("bias {:?} does not match Cout {cout}", tape.shape(b)),
        ));
    }
    if pad == Padding::Valid && (kh > h || kw > wd) {
        return Err(MgdnError::shape(
            "conv2d",
            format!("valid padding needs kernel <= input, got {kh}x{kw} on {h}x{wd}"),
        ));
    }
    let dims = ConvDims { h, w: wd, cin, cout, kh, kw, pad };
    let (oh, ow) = conv_out_size(dims);
    let data = conv2d_raw(tape.value(x), tape.value(w), tape.value(b), dims);
    let requires = tape.requires_grad(x) || tape.requires_grad(w) || tape.requires_grad(b);
    let out = tape.push_value(data, vec![oh, ow, cout], requires);
    if requires {
        tape.push_node(Node::Conv2d { x, w, b, out, dims });
    }
    Ok(out)
}

pub(crate) fn conv2d_raw(x: &[f64], w: &[f64], b: &[f64], d: ConvDims) -> Vec<f64> {
    let (oh, ow) = conv_out_size(d);
    let (py, px) = pad_offsets(d);
    if d.kh == 1 && d.kw == 1 {
        // Pointwise fast path: a plain (HW x Cin) x (Cin x Cout) product.
        let mut out = vec![0.0; oh * ow * d.cout];
        par::par_rows(&mut out, oh, ow * d.cout, |rows, block| {
            for (ri, y) in rows.clone().enumerate() {
                for ox in 0..ow {
                    let o = &mut block[(ri * ow + ox) * d.cout..][..d.cout];
                    o.copy_from_slice(b);
                    let xrow = &x[(y * d.w + ox) * d.cin..][..d.cin];
                    for (ci, &xv) in xrow.iter().enumerate() {
                        let wrow = &w[ci * d.cout..][..d.cout];
                        for (oc, wv) in o.iter_mut().zip(wrow) {
                            *oc += xv * wv;
                        }
                    }
                }
            }
        });
        return out;
    }
    // Row-tiled: each weight row is loaded once per output row instead of
    // once per pixel, and per-output accumulation order stays (dy, dx, ci).
    let mut out = vec![0.0; oh * ow * d.cout];
    par::par_rows(&mut out, oh, ow * d.cout, |rows, block| {
        for (ri, y) in rows.clone().enumerate() {
            let orow = &mut block[ri * ow * d.cout..][..ow * d.cout];
            for ox in 0..ow {
                orow[ox * d.cout..(ox + 1) * d.cout].copy_from_slice(b);
            }
            for dy in 0..d.kh {
                let iy = (y + dy).wrapping_sub(py);
                if iy >= d.h {
                    continue;
                }
                let xin = &x[iy * d.w * d.cin..][..d.w * d.cin];
                for dx in 0..d.kw {
                    // Output x positions whose tap stays in bounds.
                    let x_lo = px.saturating_sub(dx);
                    let x_hi = (d.w + px - dx).min(ow);
                    let wbase = (dy * d.kw + dx) * d.cin * d.cout;
                    for ci in 0..d.cin {
                        let wrow = &w[wbase + ci * d.cout..][..d.cout];
                        for ox in x_lo..x_hi {
                            let xv = xin[(ox + dx - px) * d.cin + ci];
                            let o = &mut orow[ox * d.cout..][..d.cout];
                            for (oc, wv) in o.iter_mut().zip(wrow) {
                                *oc += xv * wv;
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

pub(crate) fn conv2d_back_input(gout: &[f64], w: &[f64], d: ConvDims) -> Vec<f64> {
    let (oh, ow) = conv_out_size(d);
    let (py, px) = pad_offsets(d);
    let mut dx = vec![0.0; d.h * d.w * d.cin];
    if d.kh == 1 && d.kw == 1 {
        par::par_rows(&mut dx, d.h, d.w * d.cin, |rows, block| {
            for (ri, iy) in rows.clone().enumerate() {
                for ix in 0..d.w {
                    let acc = &mut block[(ri * d.w + ix) * d.cin..][..d.cin];
                    let grow = &gout[(iy * ow + ix) * d.cout..][..d.cout];
                    for (ci, a) in acc.iter_mut().enumerate() {
                        let wrow = &w[ci * d.cout..][..d.cout];
                        let mut s = 0.0;
                        for (g, wv) in grow.iter().zip(wrow) {
                            s += g * wv;
                        }
                        *a = s;
                    }
                }
            }
        });
        return dx;
    }
    par::par_rows(&mut dx, d.h, d.w * d.cin, |rows, block| {
        for (ri, iy) in rows.clone().enumerate() {
            let arow = &mut block[ri * d.w * d.cin..][..d.w * d.cin];
            for dy in 0..d.kh {
                let y = (iy + py).wrapping_sub(dy);
                if y >= oh {
                    continue;
                }
                let gin = &gout[y * ow * d.cout..][..ow * d.cout];
                for dxk in 0..d.kw {
                    // Input x positions whose producing output xo = ix +
                    // px - dxk lands in [0, ow).
                    let ix_lo = dxk.saturating_sub(px);
                    let ix_hi = (ow + dxk).saturating_sub(px).min(d.w);
                    let wbase = (dy * d.kw + dxk) * d.cin * d.cout;
                    for ci in 0..d.cin {
                        let wrow = &w[wbase + ci * d.cout..][..d.cout];
                        for ix in ix_lo..ix_hi {
                            let xo = ix + px - dxk;
                            let grow = &gin[xo * d.cout..][..d.cout];
                            let mut s = 0.0;
                            for (g, wv) in grow.iter().zip(wrow) {
                                s += g * wv;
                            }
                            arow[ix * d.cin + ci] += s;
                        }
                    }
                }
            }
        }
    });
    dx
}

pub(crate) fn conv2d_back_weight(gout: &[f64], x: &[f64], d: ConvDims) -> Vec<f64> {
    let (oh, ow) = conv_out_size(d);
    let (py, px) = pad_offsets(d);
    let acc_len = d.kh * d.kw * d.cin * d.cout;
    par::par_row_partials(oh, acc_len, |rows, acc| {
        for y in rows {
            let gin = &gout[y * ow * d.cout..][..ow * d.cout];
            for dy in 0..d.kh {
                let iy = (y + dy).wrapping_sub(py);
                if iy >= d.h {
                    continue;
                }
                let xin = &x[iy * d.w * d.cin..][..d.w * d.cin];
                for dx in 0..d.kw {
                    let x_lo = px.saturating_sub(dx);
                    let x_hi = (d.w + px - dx).min(ow);
                    let abase = (dy * d.kw + dx) * d.cin * d.cout;
                    for ci in 0..d.cin {
                        let arow = &mut acc[abase + ci * d.cout..][..d.cout];
                        for ox in x_lo..x_hi {
                            let xv = xin[(ox + dx - px) * d.cin + ci];
                            let grow = &gin[ox * d.cout..][..d.cout];
                            for (a, g) in arow.iter_mut().zip(grow) {
                                *a += xv * g;
                            }
                        }
                    }
                }
            }
        }
    })
}

/// Depthwise convolution: channel `c` of the output depends only on channel
/// `c` of the input. Kernel is `[k, k, C]`, padding is always `Same`.
pub fn depthwise_conv2d(tape: &mut Tape, x: Var, w: Var) -> Result<Var> {
    let xs = tape.shape(x).to_vec();
    let ws = tape.shape(w).to_vec();
    if xs.len() != 3 || ws.len() != 3 {
        return Err(MgdnError::shape(
            "depthwise_conv2d",
            format!("input {:?} kernel {:?}; want [H,W,C] and [k,k,C]", xs, ws),
        ));
    }
    let (h, wd, c) = (xs[0], xs[1], xs[2]);
    let k = ws[0];
    if ws[1] != k || k % 2 == 0 {
        return Err(MgdnError::shape(
            "depthwise_conv2d",
            format!("kernel must be square with odd extent, got {:?}", ws),
        ));
    }
    if ws[2] != c {
        return Err(MgdnError::shape(
            "depthwise_conv2d",
            format!("input has {c} channels but kernel has {}", ws[2]),
        ));
    }
    let data = depthwise_raw(tape.value(x), tape.value(w), h, wd, c, k);
    let requires = tape.requires_grad(x) || tape.requires_grad(w);
    let out = tape.push_value(data, vec![h, wd, c], requires);
    if requires {
        tape.push_node(Node::DepthwiseConv2d { x, w, out, h, wd, c, k });
    }
    Ok(out)
}

pub(crate) fn depthwise_raw(x: &[f64], w: &[f64], h: usize, wd: usize, c: usize, k: usize) -> Vec<f64> {
    let r = k / 2;
    let mut out = vec![0.0; h * wd * c];
    par::par_rows(&mut out, h, wd * c, |rows, block| {
        for (ri, y) in rows.clone().enumerate() {
            for ox in 0..wd {
                let o = &mut block[(ri * wd + ox) * c..][..c];
                for dy in 0..k {
                    let iy = (y + dy).wrapping_sub(r);
                    if iy >= h {
                        continue;
                    }
                    for dx in 0..k {
                        let ix = (ox + dx).wrapping_sub(r);
                        if ix >= wd {
                            continue;
                        }
                        let xrow = &x[(iy * wd + ix) * c..][..c];
                        let wrow = &w[(dy * k + dx) * c..][..c];
                        for ((oc, xv), wv) in o.iter_mut().zip(xrow).zip(wrow) {
                            *oc += xv * wv;
                        }
                    }
                }
            }
        }
    });
    out
}

pub(crate) fn depthwise_back_input(gout: &[f64], w: &[f64], h: usize, wd: usize, c: usize, k: usize) -> Vec<f64> {
    let r = k / 2;
    let mut dx = vec![0.0; h * wd * c];
    par::par_rows(&mut dx, h, wd * c, |rows, block| {
        for (ri, iy) in rows.clone().enumerate() {
            for ix in 0..wd {
                let acc = &mut block[(ri * wd + ix) * c..][..c];
                for dy in 0..k {
                    let y = (iy + r).wrapping_sub(dy);
                    if y >= h {
                        continue;
                    }
                    for dx_ in 0..k {
                        let xo = (ix + r).wrapping_sub(dx_);
                        if xo >= wd {
                            continue;
                        }
                        let grow = &gout[(y * wd + xo) * c..][..c];
                        let wrow = &w[(dy * k + dx_) * c..][..c];
                        for ((a, g), wv) in acc.iter_mut().zip(grow).zip(wrow) {
                            *a += g * wv;
                        }
                    }
                }
            }
        }
    });
    dx
}

pub(crate) fn depthwise_back_weight(gout: &[f64], x: &[f64], h: usize, wd: usize, c: usize, k: usize) -> Vec<f64> {
    let r = k / 2;
    par::par_row_partials(h, k * k * c, |rows, acc| {
        for y in rows {
            for ox in 0..wd {
                let grow = &gout[(y * wd + ox) * c..][..c];
                for dy in 0..k {
                    let iy = (y + dy).wrapping_sub(r);
                    if iy >= h {
                        continue;
                    }
                    for dx in 0..k {
                        let ix = (ox + dx).wrapping_sub(r);
                        if ix >= wd {
                            continue;
                        }
                        let xrow = &x[(iy * wd + ix) * c..][..c];
                        let arow = &mut acc[(dy * k + dx) * c..][..c];
                        for ((a, xv), g) in arow.iter_mut().zip(xrow).zip(grow) {
                            *a += xv * g;
                        }
                    }
                }
            }
        }
    })
}

/// Spatially-variant depthwise filtering: every output pixel applies its own
/// `k x k` kernel (from `kv`, shaped `[H, W, k*k]`) identically across all
/// channels of `x`, with zero padding at the borders.
pub fn dynamic_filter(tape: &mut Tape, x: Var, kv: Var) -> Result<Var> {
    let xs = tape.shape(x).to_vec();
    let ks = tape.shape(kv).to_vec();
    if xs.len() != 3 || ks.len() != 3 {
        return Err(MgdnError::shape(
            "dynamic_filter",
            format!("input {:?} kernels {:?}; want [H,W,C] and [H,W,k*k]", xs, ks),
        ));
    }
    if xs[0] != ks[0] || xs[1] != ks[1] {
        return Err(MgdnError::shape(
            "dynamic_filter",
            format!("spatial mismatch: input {:?} vs kernels {:?}", xs, ks),
        ));
    }
    let k2 = ks[2];
    let k = (k2 as f64).sqrt().round() as usize;
    if k * k != k2 || k % 2 == 0 {
        return Err(MgdnError::shape(
            "dynamic_filter",
            format!("kernel channel extent {k2} is not an odd square"),
        ));
    }
    let (h, wd, c) = (xs[0], xs[1], xs[2]);
    let data = dynfilter_raw(tape.value(x), tape.value(kv), h, wd, c, k);
    let requires = tape.requires_grad(x) || tape.requires_grad(kv);
    let out = tape.push_value(data, vec![h, wd, c], requires);
    if requires {
        tape.push_node(Node::DynamicFilter { x, kv, out, h, wd, c, k });
    }
    Ok(out)
}

pub(crate) fn dynfilter_raw(x: &[f64], kv: &[f64], h: usize, wd: usize, c: usize, k: usize) -> Vec<f64> {
    let r = k / 2;
    let k2 = k * k;
    let mut out = vec![0.0; h * wd * c];
    par::par_rows(&mut out, h, wd * c, |rows, block| {
        for (ri, y) in rows.clone().enumerate() {
            for ox in 0..wd {
                let o = &mut block[(ri * wd + ox) * c..][..c];
                let krow = &kv[(y * wd + ox) * k2..][..k2];
                for dy in 0..k {
                    let iy = (y + dy).wrapping_sub(r);
                    if iy >= h {
                        continue;
                    }
                    for dx in 0..k {
                        let ix = (ox + dx).wrapping_sub(r);
                        if ix >= wd {
                            continue;
                        }
                        let kvv = krow[dy * k + dx];
                        let xrow = &x[(iy * wd + ix) * c..][..c];
                        for (oc, xv) in o.iter_mut().zip(xrow) {
                            *oc += kvv * xv;
                        }
                    }
                }
            }
        }
    });
    out
}

pub(crate) fn dynfilter_back_input(gout: &[f64], kv: &[f64], h: usize, wd: usize, c: usize, k: usize) -> Vec<f64> {
    let r = k / 2;
    let k2 = k * k;
    let mut dx = vec![0.0; h * wd * c];
    par::par_rows(&mut dx, h, wd * c, |rows, block| {
        for (ri, iy) in rows.clone().enumerate() {
            for ix in 0..wd {
                let acc = &mut block[(ri * wd + ix) * c..][..c];
                for dy in 0..k {
                    let y = (iy + r).wrapping_sub(dy);
                    if y >= h {
                        continue;
                    }
                    for dx_ in 0..k {
                        let xo = (ix + r).wrapping_sub(dx_);
                        if xo >= wd {
                            continue;
                        }
                        let kvv = kv[(y * wd + xo) * k2 + dy * k + dx_];
                        let grow = &gout[(y * wd + xo) * c..][..c];
                        for (a, g) in acc.iter_mut().zip(grow) {
                            *a += kvv * g;
                        }
                    }
                }
            }
        }
    });
    dx
}

pub(crate) fn dynfilter_back_kernels(gout: &[f64], x: &[f64], h: usize, wd: usize, c: usize, k: usize) -> Vec<f64> {
    let r = k / 2;
    let k2 = k * k;
    let mut dkv = vec![0.0; h * wd * k2];
    par::par_rows(&mut dkv, h, wd * k2, |rows, block| {
        for (ri, y) in rows.clone().enumerate() {
            for ox in 0..wd {
                let acc = &mut block[(ri * wd + ox) * k2..][..k2];
                let grow = &gout[(y * wd + ox) * c..][..c];
                for dy in 0..k {
                    let iy = (y + dy).wrapping_sub(r);
                    if iy >= h {
                        continue;
                    }
                    for dx in 0..k {
                        let ix = (ox + dx).wrapping_sub(r);
                        if ix >= wd {
                            continue;
                        }
                        let xrow = &x[(iy * wd + ix) * c..][..c];
                        let mut s = 0.0;
                        for (g, xv) in grow.iter().zip(xrow) {
                            s += g * xv;
                        }
                        acc[dy * k + dx] += s;
                    }
                }
            }
        }
    });
    dkv
}

/// Batched matrix product `[batch, m, n]`; see [`MatMode`] for layouts.
pub fn matmul(tape: &mut Tape, a: Var, b: Var, spec: MatSpec) -> Result<Var> {
    let (a_len, b_len) = match spec.mode {
        MatMode::NN => (spec.batch * spec.m * spec.k, spec.batch * spec.k * spec.n),
        MatMode::TN => (spec.batch * spec.k * spec.m, spec.batch * spec.k * spec.n),
        MatMode::NT => (spec.batch * spec.m * spec.k, spec.batch * spec.n * spec.k),
    };
    if tape.numel(a) != a_len || tape.numel(b) != b_len {
        return Err(MgdnError::shape(
            "matmul",
            format!(
                "operands {}/{} values, spec {:?} x ({},{},{},{}) wants {}/{}",
                tape.numel(a),
                tape.numel(b),
                spec.mode,
                spec.batch,
                spec.m,
                spec.k,
                spec.n,
                a_len,
                b_len
            ),
        ));
    }
    let data = matmul_raw(spec, tape.value(a), tape.value(b));
    let requires = tape.requires_grad(a) || tape.requires_grad(b);
    let out = tape.push_value(data, vec![spec.batch, spec.m, spec.n], requires);
    if requires {
        tape.push_node(Node::Matmul { a, b, out, spec });
    }
    Ok(out)
}

pub(crate) fn matmul_raw(spec: MatSpec, a: &[f64], b: &[f64]) -> Vec<f64> {
    let MatSpec { mode, batch, m, k, n } = spec;
    let mut out = vec![0.0; batch * m * n];
    let (a_stride, b_stride) = match mode {
        MatMode::NN => (m * k, k * n),
        MatMode::TN => (k * m, k * n),
        MatMode::NT => (m * k, n * k),
    };
    let body = |bi: usize, ob: &mut [f64]| {
        let ab = &a[bi * a_stride..][..a_stride];
        let bb = &b[bi * b_stride..][..b_stride];
        match mode {
            MatMode::NN => {
                for i in 0..m {
                    let arow = &ab[i * k..][..k];
                    let orow = &mut ob[i * n..][..n];
                    for (l, &av) in arow.iter().enumerate() {
                        let brow = &bb[l * n..][..n];
                        for (o, bv) in orow.iter_mut().zip(brow) {
                            *o += av * bv;
                        }
                    }
                }
            }
            MatMode::TN => {
                for l in 0..k {
                    let arow = &ab[l * m..][..m];
                    let brow = &bb[l * n..][..n];
                    for (i, &av) in arow.iter().enumerate() {
                        let orow = &mut ob[i * n..][..n];
                        for (o, bv) in orow.iter_mut().zip(brow) {
                            *o += av * bv;
                        }
                    }
                }
            }
            MatMode::NT => {
                for i in 0..m {
                    let arow = &ab[i * k..][..k];
                    for j in 0..n {
                        let brow = &bb[j * k..][..k];
                        let mut s = 0.0;
                        for (av, bv) in arow.iter().zip(brow) {
                            s += av * bv;
                        }
                        ob[i * n + j] = s;
                    }
                }
            }
        }
    };
    if batch > 1 {
        use rayon::prelude::*;
        out.par_chunks_mut(m * n)
            .enumerate()
            .for_each(|(bi, ob)| body(bi, ob));
    } else {
        body(0, &mut out);
    }
    out
}

/// Softmax along the middle axis of an `(outer, len, inner)` view. Subtracts
/// the per-slice maximum before exponentiation.
pub fn softmax(tape: &mut Tape, x: Var, outer: usize, len: usize, inner: usize) -> Result<Var> {
    if tape.numel(x) != outer * len * inner {
        return Err(MgdnError::shape(
            "softmax",
            format!("{} values vs view {}x{}x{}", tape.numel(x), outer, len, inner),
        ));
    }
    let xs = tape.value(x);
    let mut data = vec![0.0; xs.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |l: usize| (o * len + l) * inner + i;
            let mut mx = f64::NEG_INFINITY;
            for l in 0..len {
                mx = mx.max(xs[at(l)]);
            }
            let mut sum = 0.0;
            for l in 0..len {
                let e = (xs[at(l)] - mx).exp();
                data[at(l)] = e;
                sum += e;
            }
            for l in 0..len {
                data[at(l)] /= sum;
            }
        }
    }
    let shape = tape.shape(x).to_vec();
    let requires = tape.requires_grad(x);
    let out = tape.push_value(data, shape, requires);
    if requires {
        tape.push_node(Node::Softmax { x, out, outer, len, inner });
    }
    Ok(out)
}

/// Layer normalization over the innermost axis: every row of the
/// `(rows, C)` view is normalized to zero mean / unit variance, then scaled
/// by `gamma` and shifted by `beta` (both `[C]`).
pub fn layer_norm(tape: &mut Tape, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
    let c = tape.numel(gamma);
    if tape.numel(beta) != c {
        return Err(MgdnError::shape(
            "layer_norm",
            format!("gamma {} vs beta {}", c, tape.numel(beta)),
        ));
    }
    let numel = tape.numel(x);
    if c == 0 || numel % c != 0 {
        return Err(MgdnError::shape(
            "layer_norm",
            format!("{numel} values not divisible by {c} channels"),
        ));
    }
    let rows = numel / c;
    let xs = tape.value(x);
    let g = tape.value(gamma);
    let bt = tape.value(beta);
    let mut data = vec![0.0; numel];
    let mut saved = vec![0.0; 2 * rows];
    for r in 0..rows {
        let row = &xs[r * c..(r + 1) * c];
        let mu = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
        let inv = 1.0 / (var + eps).sqrt();
        saved[2 * r] = mu;
        saved[2 * r + 1] = inv;
        for j in 0..c {
            data[r * c + j] = g[j] * ((row[j] - mu) * inv) + bt[j];
        }
    }
    let shape = tape.shape(x).to_vec();
    let requires = tape.requires_grad(x) || tape.requires_grad(gamma) || tape.requires_grad(beta);
    let out = tape.push_value(data, shape, requires);
    if requires {
        tape.push_node(Node::LayerNorm { x, gamma, beta, out, rows, c, saved });
    }
    Ok(out)
}

pub fn sigmoid(tape: &mut Tape, x: Var) -> Result<Var> {
    let data: Vec<f64> = tape.value(x).iter().map(|v| sigmoid_scalar(*v)).collect();
    let shape = tape.shape(x).to_vec();
    let requires = tape.requires_grad(x);
    let out = tape.push_value(data, shape, requires);
    if requires {
        tape.push_node(Node::Sigmoid { x, out });
    }
    Ok(out)
}

pub fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Smooth ReLU-like activation `x * sigmoid(x)`.
pub fn silu(tape: &mut Tape, x: Var) -> Result<Var> {
    let s = sigmoid(tape, x)?;
    mul(tape, x, s)
}

pub fn exp(tape: &mut Tape, x: Var) -> Result<Var> {
    let data: Vec<f64> = tape.value(x).iter().map(|v| v.exp()).collect();
    let shape = tape.shape(x).to_vec();
    let requires = tape.requires_grad(x);
    let out = tape.push_value(data, shape, requires);
    if requires {
        tape.push_node(Node::Exp { x, out });
    }
    Ok(out)
}

pub fn abs(tape: &mut Tape, x: Var) -> Result<Var> {
    let data: Vec<f64> = tape.value(x).iter().map(|v| v.abs()).collect();
    let shape = tape.shape(x).to_vec();
    let requires = tape.requires_grad(x);
    let out = tape.push_value(data, shape, requires);
    if requires {
        tape.push_node(Node::Abs { x, out });
    }
    Ok(out)
}

macro_rules! binary_op {
    ($name:ident, $node:ident, $f:expr) => {
        pub fn $name(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
            same_numel(stringify!($name), tape, a, b)?;
            let f = $f;
            let data: Vec<f64> = tape
                .value(a)
                .iter()
                .zip(tape.value(b))
                .map(|(x, y)| f(*x, *y))
                .collect();
            let shape = tape.shape(a).to_vec();
            let requires = tape.requires_grad(a) || tape.requires_grad(b);
            let out = tape.push_value(data, shape, requires);
            if requires {
                tape.push_node(Node::$node { a, b, out });
            }
            Ok(out)
        }
    };
}

binary_op!(add, Add, |x: f64, y: f64| x + y);
binary_op!(sub, Sub, |x: f64, y: f64| x - y);
binary_op!(mul, Mul, |x: f64, y: f64| x * y);
binary_op!(div, Div, |x: f64, y: f64| x / y);

/// Elementwise `mul * x + add_c`.
pub fn affine(tape: &mut Tape, x: Var, mul: f64, add_c: f64) -> Result<Var> {
    let data: Vec<f64> = tape.value(x).iter().map(|v| mul * v + add_c).collect();
    let shape = tape.shape(x).to_vec();
    let requires = tape.requires_grad(x);
    let out = tape.push_value(data, shape, requires);
    if requires {
        tape.push_node(Node::Affine { x, out, mul });
    }
    Ok(out)
}

pub fn scale(tape: &mut Tape, x: Var, factor: f64) -> Result<Var> {
    affine(tape, x, factor, 0.0)
}

pub fn one_minus(tape: &mut Tape, x: Var) -> Result<Var> {
    affine(tape, x, -1.0, 1.0)
}

/// Broadcast-multiplies `x` by a single-element variable.
pub fn mul_scalar(tape: &mut Tape, x: Var, s: Var) -> Result<Var> {
    if tape.numel(s) != 1 {
        return Err(MgdnError::shape(
            "mul_scalar",
            format!("scalar operand has shape {:?}", tape.shape(s)),
        ));
    }
    let sv = tape.value(s)[0];
    let data: Vec<f64> = tape.value(x).iter().map(|v| v * sv).collect();
    let shape = tape.shape(x).to_vec();
    let requires = tape.requires_grad(x) || tape.requires_grad(s);
    let out = tape.push_value(data, shape, requires);
    if requires {
        tape.push_node(Node::MulScalar { x, s, out });
    }
    Ok(out)
}

/// Sums the middle axis of an `(outer, len, inner)` view.
pub fn sum_axis(tape: &mut Tape, x: Var, outer: usize, len: usize, inner: usize) -> Result<Var> {
    if tape.numel(x) != outer * len * inner {
        return Err(MgdnError::shape(
            "sum_axis",
            format!("{} values vs view {}x{}x{}", tape.numel(x), outer, len, inner),
        ));
    }
    let xs = tape.value(x);
    let mut data = vec![0.0; outer * inner];
    for o in 0..outer {
        for l in 0..len {
            for i in 0..inner {
                data[o * inner + i] += xs[(o * len + l) * inner + i];
            }
        }
    }
    let requires = tape.requires_grad(x);
    let out = tape.push_value(data, vec![outer, inner], requires);
    if requires {
        tape.push_node(Node::SumAxis { x, out, outer, len, inner });
    }
    Ok(out)
}

/// Repeats each `(outer, inner)` element `len` times along a new middle axis.
pub fn broadcast_axis(tape: &mut Tape, x: Var, outer: usize, len: usize, inner: usize) -> Result<Var> {
    if tape.numel(x) != outer * inner {
        return Err(MgdnError::shape(
            "broadcast_axis",
            format!("{} values vs view {}x{}", tape.numel(x), outer, inner),
        ));
    }
    let xs = tape.value(x);
    let mut data = vec![0.0; outer * len * inner];
    for o in 0..outer {
        for l in 0..len {
            data[(o * len + l) * inner..(o * len + l + 1) * inner]
                .copy_from_slice(&xs[o * inner..(o + 1) * inner]);
        }
    }
    let requires = tape.requires_grad(x);
    let out = tape.push_value(data, vec![outer, len, inner], requires);
    if requires {
        tape.push_node(Node::BroadcastAxis { x, out, outer, len, inner });
    }
    Ok(out)
}

pub fn sum_all(tape: &mut Tape, x: Var) -> Result<Var> {
    let n = tape.numel(x);
    sum_axis(tape, x, 1, n, 1)
}

pub fn mean_all(tape: &mut Tape, x: Var) -> Result<Var> {
    let n = tape.numel(x);
    let s = sum_all(tape, x)?;
    scale(tape, s, 1.0 / n as f64)
}

/// Per-channel spatial mean of an `[H, W, C]` tensor, returning `[C]`.
pub fn global_avg_pool(tape: &mut Tape, x: Var) -> Result<Var> {
    let xs = tape.shape(x).to_vec();
    if xs.len() != 3 {
        return Err(MgdnError::shape(
            "global_avg_pool",
            format!("want [H,W,C], got {:?}", xs),
        ));
    }
    let (hw, c) = (xs[0] * xs[1], xs[2]);
    let s = sum_axis(tape, x, 1, hw, c)?;
    scale(tape, s, 1.0 / hw as f64)
}

/// Concatenates along the innermost axis: inputs viewed as `(rows, w_i)`.
pub fn concat_cols(tape: &mut Tape, xs: &[Var], rows: usize) -> Result<Var> {
    let mut widths = Vec::with_capacity(xs.len());
    for &v in xs {
        let n = tape.numel(v);
        if rows == 0 || n % rows != 0 {
            return Err(MgdnError::shape(
                "concat_cols",
                format!("{n} values not divisible into {rows} rows"),
            ));
        }
        widths.push(n / rows);
    }
    let total: usize = widths.iter().sum();
    let mut data = vec![0.0; rows * total];
    let mut off = 0;
    for (&v, &wdt) in xs.iter().zip(&widths) {
        let src = tape.value(v);
        for r in 0..rows {
            data[r * total + off..r * total + off + wdt]
                .copy_from_slice(&src[r * wdt..(r + 1) * wdt]);
        }
        off += wdt;
    }
    let requires = xs.iter().any(|&v| tape.requires_grad(v));
    let out = tape.push_value(data, vec![rows, total], requires);
    if requires {
        tape.push_node(Node::Concat { xs: xs.to_vec(), out, rows, widths });
    }
    Ok(out)
}

/// Takes columns `[from, from+take)` of a `(rows, width)` view.
pub fn slice_cols(tape: &mut Tape, x: Var, rows: usize, width: usize, from: usize, take: usize) -> Result<Var> {
    if tape.numel(x) != rows * width || from + take > width {
        return Err(MgdnError::shape(
            "slice_cols",
            format!(
                "{} values as {}x{}, slice {}..{}",
                tape.numel(x),
                rows,
                width,
                from,
                from + take
            ),
        ));
    }
    let xs = tape.value(x);
    let mut data = vec![0.0; rows * take];
    for r in 0..rows {
        data[r * take..(r + 1) * take].copy_from_slice(&xs[r * width + from..r * width + from + take]);
    }
    let requires = tape.requires_grad(x);
    let out = tape.push_value(data, vec![rows, take], requires);
    if requires {
        tape.push_node(Node::Slice { x, out, rows, width, from, take });
    }
    Ok(out)
}

/// Same data under a new shape (copying; the tape has no views).
pub fn reshape(tape: &mut Tape, x: Var, shape: Vec<usize>) -> Result<Var> {
    let n: usize = shape.iter().product();
    if n != tape.numel(x) {
        return Err(MgdnError::shape(
            "reshape",
            format!("{:?} ({} values) as {:?}", tape.shape(x), tape.numel(x), shape),
        ));
    }
    gather(tape, x, Arc::new((0..n).collect()), shape)
}

/// Multiplies every spatial position of `x` (shaped `[.., C]`) by a `[C]`
/// gate vector.
pub fn mul_channels(tape: &mut Tape, x: Var, gate: Var) -> Result<Var> {
    let c = tape.numel(gate);
    let n = tape.numel(x);
    if c == 0 || n % c != 0 {
        return Err(MgdnError::shape(
            "mul_channels",
            format!("{n} values not divisible by gate of {c}"),
        ));
    }
    let rows = n / c;
    let x_shape = tape.shape(x).to_vec();
    let wide = broadcast_axis(tape, gate, 1, rows, c)?;
    let wide = reshape(tape, wide, x_shape)?;
    mul(tape, x, wide)
}

/// Arbitrary permutation/selection: `out[i] = x[idx[i]]`, with `usize::MAX`
/// entries producing zero fill (used for padding).
pub fn gather(tape: &mut Tape, x: Var, idx: Arc<Vec<usize>>, out_shape: Vec<usize>) -> Result<Var> {
    let n: usize = out_shape.iter().product();
    if n != idx.len() {
        return Err(MgdnError::shape(
            "gather",
            format!("index len {} vs output shape {:?}", idx.len(), out_shape),
        ));
    }
    let xs = tape.value(x);
    let mut data = vec![0.0; n];
    for (o, &src) in data.iter_mut().zip(idx.iter()) {
        if src != usize::MAX {
            debug_assert!(src < xs.len());
            *o = xs[src];
        }
    }
    let requires = tape.requires_grad(x);
    let out = tape.push_value(data, out_shape, requires);
    if requires {
        tape.push_node(Node::Gather { x, out, idx });
    }
    Ok(out)
}

/// Shannon entropy `-sum p ln(max(p, eps))` in nats, as a scalar.
pub fn entropy(tape: &mut Tape, p: Var, eps: f64) -> Result<Var> {
    let s: f64 = tape
        .value(p)
        .iter()
        .map(|&pi| -pi * pi.max(eps).ln())
        .sum();
    let requires = tape.requires_grad(p);
    let out = tape.push_value(vec![s], vec![1], requires);
    if requires {
        tape.push_node(Node::Entropy { p, out, eps });
    }
    Ok(out)
}

/// Mu-law compression `ln(1 + mu*x) / ln(1 + mu)`; negatives clamp to zero.
pub fn mu_law(tape: &mut Tape, x: Var, mu: f64) -> Result<Var> {
    let denom = (1.0 + mu).ln();
    let data: Vec<f64> = tape
        .value(x)
        .iter()
        .map(|&v| (1.0 + mu * v.max(0.0)).ln() / denom)
        .collect();
    let shape = tape.shape(x).to_vec();
    let requires = tape.requires_grad(x);
    let out = tape.push_value(data, shape, requires);
    if requires {
        tape.push_node(Node::MuLaw { x, out, mu });
    }
    Ok(out)
}

/// Snaps `[lo, hi]` outward to multiples of roughly `span / 128`.
fn stable_range(lo: f64, hi: f64) -> (f64, f64) {
    let span = hi - lo;
    let q = 2f64.powi((span.log2().floor() as i32) - 7);
    (q * (lo / q).floor(), q * (hi / q).ceil())
}

/// Result of a joint soft-histogram estimation.
pub struct SoftHist {
    /// Joint distribution, `[B, B]`, rows indexed by the first input's bins.
    pub joint: Var,
    pub centers1: Vec<f64>,
    pub centers2: Vec<f64>,
}

/// Differentiable joint histogram with per-pixel Gaussian bin weights
/// normalized over bins. Bin ranges come from the observed min/max and are
/// detached from the gradient. Returns `None` when either input has a
/// degenerate (constant) range.
pub fn soft_joint_hist(
    tape: &mut Tape,
    t1: Var,
    t2: Var,
    bins: usize,
    sigma_scale: f64,
) -> Result<Option<SoftHist>> {
    if tape.numel(t1) != tape.numel(t2) {
        return Err(MgdnError::shape(
            "soft_joint_hist",
            format!("{} vs {} values", tape.numel(t1), tape.numel(t2)),
        ));
    }
    if bins < 2 {
        return Err(MgdnError::Contract(format!("need >= 2 bins, got {bins}")));
    }
    let n = tape.numel(t1);
    let range = |v: &[f64]| {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &x in v {
            lo = lo.min(x);
            hi = hi.max(x);
        }
        (lo, hi)
    };
    let (lo1, hi1) = range(tape.value(t1));
    let (lo2, hi2) = range(tape.value(t2));
    if !(hi1 > lo1) || !(hi2 > lo2) {
        return Ok(None);
    }
    let make_centers = |lo: f64, hi: f64| -> (Vec<f64>, f64) {
        // The range is detached from the tape. Quantize it outward on a
        // coarse grid so that small input perturbations cannot move the
        // binning; otherwise finite differences would see a grid shift the
        // analytic gradient deliberately ignores.
        let (lo, hi) = stable_range(lo, hi);
        let step = (hi - lo) / (bins - 1) as f64;
        ((0..bins).map(|i| lo + step * i as f64).collect(), step * sigma_scale)
    };
    let (centers1, sigma1) = make_centers(lo1, hi1);
    let (centers2, sigma2) = make_centers(lo2, hi2);

    let weights = |vals: &[f64], centers: &[f64], sigma: f64| -> Vec<f64> {
        let inv2s2 = 1.0 / (2.0 * sigma * sigma);
        let mut w = vec![0.0; n * bins];
        par::par_rows(&mut w, n, bins, |rows, block| {
            for (i, p) in rows.clone().enumerate() {
                let t = vals[p];
                let row = &mut block[i * bins..(i + 1) * bins];
                let mut mx = f64::NEG_INFINITY;
                for (a, c) in centers.iter().enumerate() {
                    let l = -(t - c) * (t - c) * inv2s2;
                    row[a] = l;
                    mx = mx.max(l);
                }
                let mut sum = 0.0;
                for r in row.iter_mut() {
                    *r = (*r - mx).exp();
                    sum += *r;
                }
                for r in row.iter_mut() {
                    *r /= sum;
                }
            }
        });
        w
    };
    let w1 = weights(tape.value(t1), &centers1, sigma1);
    let w2 = weights(tape.value(t2), &centers2, sigma2);

    let inv_n = 1.0 / n as f64;
    let mut joint = par::par_row_partials(n, bins * bins, |rows, acc| {
        for p in rows {
            let r1 = &w1[p * bins..(p + 1) * bins];
            let r2 = &w2[p * bins..(p + 1) * bins];
            for (a, &wa) in r1.iter().enumerate() {
                let arow = &mut acc[a * bins..(a + 1) * bins];
                for (dst, &wb) in arow.iter_mut().zip(r2) {
                    *dst += wa * wb;
                }
            }
        }
    });
    for v in joint.iter_mut() {
        *v *= inv_n;
    }

    let requires = tape.requires_grad(t1) || tape.requires_grad(t2);
    let out = tape.push_value(joint, vec![bins, bins], requires);
    if requires {
        tape.push_node(Node::SoftJointHist {
            t1,
            t2,
            out,
            bins,
            centers1: centers1.clone(),
            centers2: centers2.clone(),
            sigma1,
            sigma2,
            w1,
            w2,
        });
    }
    Ok(Some(SoftHist { joint: out, centers1, centers2 }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect()
    }

    /// Quadruple-loop reference convolution.
    fn conv2d_oracle(
        x: &[f64],
        w: &[f64],
        b: &[f64],
        (h, wd, cin): (usize, usize, usize),
        (kh, kw, cout): (usize, usize, usize),
        same: bool,
    ) -> Vec<f64> {
        let (oh, ow) = if same { (h, wd) } else { (h + 1 - kh, wd + 1 - kw) };
        let (py, px) = if same { (kh as isize / 2, kw as isize / 2) } else { (0, 0) };
        let mut out = vec![0.0; oh * ow * cout];
        for y in 0..oh {
            for ox in 0..ow {
                for co in 0..cout {
                    let mut s = b[co];
                    for dy in 0..kh {
                        for dx in 0..kw {
                            let iy = y as isize + dy as isize - py;
                            let ix = ox as isize + dx as isize - px;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            for ci in 0..cin {
                                s += x[((iy as usize * wd) + ix as usize) * cin + ci]
                                    * w[((dy * kw + dx) * cin + ci) * cout + co];
                            }
                        }
                    }
                    out[(y * ow + ox) * cout + co] = s;
                }
            }
        }
        out
    }

    #[test]
    fn conv2d_identity_kernel() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![0.3, -1.0, 2.5, 0.0, 7.0, -3.0], vec![2, 3, 1]);
        let w = tape.constant(vec![1.0], vec![1, 1, 1, 1]);
        let b = tape.constant(vec![0.0], vec![1]);
        let y = conv2d(&mut tape, x, w, b, Padding::Same).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn conv2d_ones_kernel_on_constant() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![1.0; 25], vec![5, 5, 1]);
        let w = tape.constant(vec![1.0; 9], vec![3, 3, 1, 1]);
        let b = tape.constant(vec![0.0], vec![1]);
        let y = conv2d(&mut tape, x, w, b, Padding::Same).unwrap();
        // Interior pixels sum nine ones.
        for y_ in 1..4 {
            for x_ in 1..4 {
                assert_eq!(tape.value(y)[y_ * 5 + x_], 9.0);
            }
        }
        assert_eq!(tape.value(y)[0], 4.0); // corner sees a 2x2 patch
    }

    #[test]
    fn conv2d_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for case in 0..20 {
            let (h, wd, cin, cout) = (
                3 + case % 4,
                3 + (case / 2) % 4,
                1 + case % 3,
                1 + (case + 1) % 3,
            );
            let (kh, kw) = if case % 2 == 0 { (3, 3) } else { (3, 1) };
            let same = case % 3 != 0;
            let xs = randn(&mut rng, h * wd * cin);
            let ws = randn(&mut rng, kh * kw * cin * cout);
            let bs = randn(&mut rng, cout);
            let mut tape = Tape::new();
            let x = tape.constant(xs.clone(), vec![h, wd, cin]);
            let w = tape.constant(ws.clone(), vec![kh, kw, cin, cout]);
            let b = tape.constant(bs.clone(), vec![cout]);
            let pad = if same { Padding::Same } else { Padding::Valid };
            let y = conv2d(&mut tape, x, w, b, pad).unwrap();
            let want = conv2d_oracle(&xs, &ws, &bs, (h, wd, cin), (kh, kw, cout), same);
            for (got, want) in tape.value(y).iter().zip(&want) {
                assert!((got - want).abs() <= 1e-12, "case {case}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn conv2d_rejects_channel_mismatch() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![0.0; 2 * 2 * 3], vec![2, 2, 3]);
        let w = tape.constant(vec![0.0; 9 * 2 * 4], vec![3, 3, 2, 4]);
        let b = tape.constant(vec![0.0; 4], vec![4]);
        let err = conv2d(&mut tape, x, w, b, Padding::Same).unwrap_err();
        assert!(err.to_string().contains("channels"), "{err}");
    }

    #[test]
    fn depthwise_delta_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xs = randn(&mut rng, 4 * 5 * 2);
        let mut w = vec![0.0; 9 * 2];
        for c in 0..2 {
            w[(1 * 3 + 1) * 2 + c] = 1.0; // center tap
        }
        let mut tape = Tape::new();
        let x = tape.constant(xs.clone(), vec![4, 5, 2]);
        let wv = tape.constant(w, vec![3, 3, 2]);
        let y = depthwise_conv2d(&mut tape, x, wv).unwrap();
        assert_eq!(tape.value(y), &xs[..]);
    }

    #[test]
    fn depthwise_channels_are_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let xs = randn(&mut rng, 6 * 6 * 2);
        let mut w = randn(&mut rng, 9 * 2);
        for j in 0..9 {
            w[j * 2] = 0.0; // zero out channel 0 taps
        }
        let mut tape = Tape::new();
        let x = tape.constant(xs, vec![6, 6, 2]);
        let wv = tape.constant(w, vec![3, 3, 2]);
        let y = depthwise_conv2d(&mut tape, x, wv).unwrap();
        for p in 0..36 {
            assert_eq!(tape.value(y)[p * 2], 0.0);
        }
    }

    #[test]
    fn depthwise_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for case in 0..20 {
            let (h, wd, c) = (3 + case % 4, 4 + case % 3, 1 + case % 4);
            let k = 3;
            let xs = randn(&mut rng, h * wd * c);
            let ws = randn(&mut rng, k * k * c);
            let mut tape = Tape::new();
            let x = tape.constant(xs.clone(), vec![h, wd, c]);
            let wv = tape.constant(ws.clone(), vec![k, k, c]);
            let y = depthwise_conv2d(&mut tape, x, wv).unwrap();
            for y_ in 0..h {
                for x_ in 0..wd {
                    for cc in 0..c {
                        let mut s = 0.0;
                        for dy in 0..k {
                            for dx in 0..k {
                                let iy = y_ as isize + dy as isize - 1;
                                let ix = x_ as isize + dx as isize - 1;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                s += xs[(iy as usize * wd + ix as usize) * c + cc]
                                    * ws[(dy * k + dx) * c + cc];
                            }
                        }
                        let got = tape.value(y)[(y_ * wd + x_) * c + cc];
                        assert!((got - s).abs() <= 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn matmul_identity_and_zero() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![1.0, 0.0, 0.0, 1.0], vec![2, 2]);
        let m = tape.constant(vec![3.0, -1.0, 2.0, 0.5], vec![2, 2]);
        let spec = MatSpec { mode: MatMode::NN, batch: 1, m: 2, k: 2, n: 2 };
        let y = matmul(&mut tape, a, m, spec).unwrap();
        assert_eq!(tape.value(y), tape.value(m));
        let z = tape.constant(vec![0.0; 4], vec![2, 2]);
        let y2 = matmul(&mut tape, m, z, spec).unwrap();
        assert_eq!(tape.value(y2), &[0.0; 4]);
    }

    #[test]
    fn matmul_modes_match_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (m, k, n) = (3, 4, 2);
        let a_nn = randn(&mut rng, m * k);
        let b_nn = randn(&mut rng, k * n);
        // NN oracle
        let mut want = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for l in 0..k {
                    want[i * n + j] += a_nn[i * k + l] * b_nn[l * n + j];
                }
            }
        }
        let mut tape = Tape::new();
        let a = tape.constant(a_nn.clone(), vec![m, k]);
        let b = tape.constant(b_nn.clone(), vec![k, n]);
        let y = matmul(&mut tape, a, b, MatSpec { mode: MatMode::NN, batch: 1, m, k, n }).unwrap();
        for (g, w) in tape.value(y).iter().zip(&want) {
            assert!((g - w).abs() <= 1e-12);
        }
        // TN: same product with a stored transposed.
        let mut a_t = vec![0.0; k * m];
        for i in 0..m {
            for l in 0..k {
                a_t[l * m + i] = a_nn[i * k + l];
            }
        }
        let at = tape.constant(a_t, vec![k, m]);
        let y2 = matmul(&mut tape, at, b, MatSpec { mode: MatMode::TN, batch: 1, m, k, n }).unwrap();
        for (g, w) in tape.value(y2).iter().zip(&want) {
            assert!((g - w).abs() <= 1e-12);
        }
        // NT: same product with b stored transposed.
        let mut b_t = vec![0.0; n * k];
        for l in 0..k {
            for j in 0..n {
                b_t[j * k + l] = b_nn[l * n + j];
            }
        }
        let bt = tape.constant(b_t, vec![n, k]);
        let y3 = matmul(&mut tape, a, bt, MatSpec { mode: MatMode::NT, batch: 1, m, k, n }).unwrap();
        for (g, w) in tape.value(y3).iter().zip(&want) {
            assert!((g - w).abs() <= 1e-12);
        }
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![0.0; 6], vec![2, 3]);
        let b = tape.constant(vec![0.0; 8], vec![4, 2]);
        let err = matmul(&mut tape, a, b, MatSpec { mode: MatMode::NN, batch: 1, m: 2, k: 3, n: 2 })
            .unwrap_err();
        assert!(err.to_string().contains("shape error"));
    }

    #[test]
    fn softmax_values() {
        let mut tape = Tape::new();
        let one = tape.constant(vec![7.3], vec![1]);
        let y = softmax(&mut tape, one, 1, 1, 1).unwrap();
        assert_eq!(tape.value(y), &[1.0]);

        let pair = tape.constant(vec![0.0, 0.0], vec![2]);
        let y = softmax(&mut tape, pair, 1, 2, 1).unwrap();
        assert_eq!(tape.value(y), &[0.5, 0.5]);

        let forced = tape.constant(vec![0.0, 3.0f64.ln()], vec![2]);
        let y = softmax(&mut tape, forced, 1, 2, 1).unwrap();
        assert!((tape.value(y)[0] - 0.25).abs() < 1e-15);
        assert!((tape.value(y)[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_slices_sum_to_one_and_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let (outer, len, inner) = (2, 5, 3);
            let xs = randn(&mut rng, outer * len * inner);
            let shifted: Vec<f64> = xs.iter().map(|v| v + 17.25).collect();
            let mut tape = Tape::new();
            let x = tape.constant(xs, vec![outer, len, inner]);
            let xsft = tape.constant(shifted, vec![outer, len, inner]);
            let y = softmax(&mut tape, x, outer, len, inner).unwrap();
            let ysft = softmax(&mut tape, xsft, outer, len, inner).unwrap();
            for o in 0..outer {
                for i in 0..inner {
                    let mut s = 0.0;
                    for l in 0..len {
                        s += tape.value(y)[(o * len + l) * inner + i];
                    }
                    assert!((s - 1.0).abs() <= 1e-12);
                }
            }
            for (a, b) in tape.value(y).iter().zip(tape.value(ysft)) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn layer_norm_cases() {
        let mut tape = Tape::new();
        let gamma = tape.constant(vec![1.0, 1.0], vec![2]);
        let beta = tape.constant(vec![0.0, 0.0], vec![2]);

        // Constant slice -> 0 (eps keeps it finite).
        let c = tape.constant(vec![4.0, 4.0], vec![1, 1, 2]);
        let y = layer_norm(&mut tape, c, gamma, beta, 1e-6).unwrap();
        assert!(tape.value(y).iter().all(|v| v.abs() < 1e-12));

        // Already normalized slice passes through at eps = 0.
        let u = tape.constant(vec![-1.0, 1.0], vec![1, 1, 2]);
        let y = layer_norm(&mut tape, u, gamma, beta, 0.0).unwrap();
        assert!((tape.value(y)[0] + 1.0).abs() < 1e-12);
        assert!((tape.value(y)[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_matches_two_pass_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let c = 6;
        let rows = 4;
        let xs = randn(&mut rng, rows * c);
        let gs = randn(&mut rng, c);
        let bs = randn(&mut rng, c);
        let mut tape = Tape::new();
        let x = tape.constant(xs.clone(), vec![rows, c]);
        let g = tape.constant(gs.clone(), vec![c]);
        let b = tape.constant(bs.clone(), vec![c]);
        let y = layer_norm(&mut tape, x, g, b, 1e-9).unwrap();
        for r in 0..rows {
            let row = &xs[r * c..(r + 1) * c];
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            for j in 0..c {
                let want = gs[j] * (row[j] - mu) / (var + 1e-9).sqrt() + bs[j];
                let got = tape.value(y)[r * c + j];
                assert!((got - want).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn pointwise_and_pool_values() {
        let mut tape = Tape::new();
        let z = tape.constant(vec![0.0], vec![1]);
        let s = sigmoid(&mut tape, z).unwrap();
        assert_eq!(tape.value(s), &[0.5]);

        let img = tape.constant(vec![2.5; 3 * 2 * 2], vec![3, 2, 2]);
        let p = global_avg_pool(&mut tape, img).unwrap();
        assert_eq!(tape.value(p), &[2.5, 2.5]);
    }

    #[test]
    fn mu_law_values() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![0.0, 1.0, 0.01], vec![3]);
        let y = mu_law(&mut tape, x, 5000.0).unwrap();
        assert_eq!(tape.value(y)[0], 0.0);
        assert!((tape.value(y)[1] - 1.0).abs() < 1e-15);
        let want = 51.0f64.ln() / 5001.0f64.ln();
        assert!((tape.value(y)[2] - want).abs() < 1e-15);
        assert!((want - 0.4617).abs() < 1e-4);
    }

    #[test]
    fn entropy_values() {
        let mut tape = Tape::new();
        let u = tape.constant(vec![0.25; 4], vec![4]);
        let h = entropy(&mut tape, u, 1e-12).unwrap();
        assert!((tape.value(h)[0] - 4.0f64.ln()).abs() < 1e-12);

        let onehot = tape.constant(vec![1.0, 0.0, 0.0], vec![3]);
        let h = entropy(&mut tape, onehot, 1e-12).unwrap();
        assert!(tape.value(h)[0].abs() < 1e-12);

        let p = tape.constant(vec![0.25, 0.75], vec![2]);
        let h = entropy(&mut tape, p, 1e-12).unwrap();
        let want = -(0.25f64 * 0.25f64.ln() + 0.75 * 0.75f64.ln());
        assert!((tape.value(h)[0] - want).abs() < 1e-12);
        assert!((want - 0.5623).abs() < 1e-4);
    }

    #[test]
    fn concat_slice_roundtrip() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![1.0, 2.0, 3.0, 4.0], vec![2, 2]);
        let b = tape.constant(vec![5.0, 6.0], vec![2, 1]);
        let cat = concat_cols(&mut tape, &[a, b], 2).unwrap();
        assert_eq!(tape.value(cat), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let back = slice_cols(&mut tape, cat, 2, 3, 2, 1).unwrap();
        assert_eq!(tape.value(back), &[5.0, 6.0]);
    }

    #[test]
    fn gather_with_zero_fill() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![10.0, 20.0, 30.0], vec![3]);
        let idx = Arc::new(vec![2usize, usize::MAX, 0]);
        let y = gather(&mut tape, x, idx, vec![3]).unwrap();
        assert_eq!(tape.value(y), &[30.0, 0.0, 10.0]);
    }

    #[test]
    fn soft_hist_marginals_are_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 64;
        let t1v = randn(&mut rng, n);
        let t2v = randn(&mut rng, n);
        let mut tape = Tape::new();
        let t1 = tape.constant(t1v, vec![n]);
        let t2 = tape.constant(t2v, vec![n]);
        let hist = soft_joint_hist(&mut tape, t1, t2, 16, 1.5).unwrap().unwrap();
        let joint = tape.value(hist.joint).to_vec();
        let total: f64 = joint.iter().sum();
        assert!((total - 1.0).abs() <= 1e-12);
        let p1 = sum_axis(&mut tape, hist.joint, 16, 16, 1).unwrap();
        let p2 = sum_axis(&mut tape, hist.joint, 1, 16, 16).unwrap();
        for a in 0..16 {
            let row: f64 = (0..16).map(|b| joint[a * 16 + b]).sum();
            assert!((row - tape.value(p1)[a]).abs() <= 1e-12);
        }
        for b in 0..16 {
            let col: f64 = (0..16).map(|a| joint[a * 16 + b]).sum();
            assert!((col - tape.value(p2)[b]).abs() <= 1e-12);
        }
    }

    #[test]
    fn soft_hist_concentrates_with_small_sigma() {
        // All the mass lands in the occupied bin when sigma is tiny.
        let n = 32;
        let vals: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { 0.0 } else { 1.0 }).collect();
        let mut tape = Tape::new();
        let t1 = tape.constant(vals.clone(), vec![n]);
        let t2 = tape.constant(vals, vec![n]);
        let hist = soft_joint_hist(&mut tape, t1, t2, 8, 0.01).unwrap().unwrap();
        let joint = tape.value(hist.joint);
        assert!(joint[0] >= 0.4995, "corner mass {}", joint[0]);
        assert!(joint[8 * 8 - 1] >= 0.4995);
    }

    #[test]
    fn soft_hist_degenerate_range_returns_none() {
        let mut tape = Tape::new();
        let t1 = tape.constant(vec![0.5; 10], vec![10]);
        let t2 = tape.constant(vec![0.1, 0.9, 0.5, 0.3, 0.2, 0.6, 0.7, 0.8, 0.4, 0.35], vec![10]);
        assert!(soft_joint_hist(&mut tape, t1, t2, 8, 1.5).unwrap().is_none());
    }

    #[test]
    fn soft_hist_approaches_hard_histogram() {
        // With sigma -> 0.01 * binwidth the soft histogram matches hard
        // binning in total variation.
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let n = 512;
        let bins = 8;
        let t1v: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let t2v: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let mut tape = Tape::new();
        let t1 = tape.constant(t1v.clone(), vec![n]);
        let t2 = tape.constant(t2v.clone(), vec![n]);
        let hist = soft_joint_hist(&mut tape, t1, t2, bins, 0.01).unwrap().unwrap();
        let soft = tape.value(hist.joint);

        // Hard-binned oracle with the same bin centers (nearest center).
        let nearest = |v: f64, centers: &[f64]| -> usize {
            let mut best = 0;
            let mut bd = f64::INFINITY;
            for (i, c) in centers.iter().enumerate() {
                let d = (v - c).abs();
                if d < bd {
                    bd = d;
                    best = i;
                }
            }
            best
        };
        let mut hard = vec![0.0; bins * bins];
        for p in 0..n {
            let a = nearest(t1v[p], &hist.centers1);
            let b = nearest(t2v[p], &hist.centers2);
            hard[a * bins + b] += 1.0 / n as f64;
        }
        let tv: f64 = soft
            .iter()
            .zip(&hard)
            .map(|(s, h)| (s - h).abs())
            .sum::<f64>()
            / 2.0;
        assert!(tv <= 0.05, "total variation {tv}");
    }
}
