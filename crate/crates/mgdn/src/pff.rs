//! Parallel feature fusion.
//!
//! The filtered streams are concatenated, projected to the working width,
//! and pushed through two branches added at the end: a window-attention
//! transformer encoder layer for long-range context and a convolutional
//! local branch gated by channel attention. Windows are shifted on
//! alternate stages; non-divisible extents are zero-padded internally and
//! cropped on the way out.

use std::sync::Arc;

use crate::error::{MgdnError, Result};
use crate::tensor::ops;
use crate::tensor::tape::{MatMode, MatSpec, Padding};
use crate::tensor::{Tape, Var};

/// Tape handles for one PFF block.
#[derive(Debug, Clone, Copy)]
pub struct PffVars {
    /// 1x1 merge of the concatenated streams down to C channels.
    pub merge: (Var, Var),
    pub ln1: (Var, Var),
    pub attn_q: (Var, Var),
    pub attn_k: (Var, Var),
    pub attn_v: (Var, Var),
    pub attn_out: (Var, Var),
    pub ln2: (Var, Var),
    /// Feed-forward expansion C -> 2C -> C.
    pub ffn1: (Var, Var),
    pub ffn2: (Var, Var),
    /// Global branch output projection; zeroing it silences the branch.
    pub out_proj: (Var, Var),
    pub local1: (Var, Var),
    pub local2: (Var, Var),
    /// Channel-attention squeeze/excite projections (C -> C/r -> C).
    pub gate1: (Var, Var),
    pub gate2: (Var, Var),
    pub window: usize,
    /// Cyclic pre-shift in pixels; 0 on even stages.
    pub shift: usize,
    pub heads: usize,
}

/// Gather maps for (pad -> cyclic shift -> window partition) and its exact
/// inverse, in head-major token layout `[nW*heads, T, d]`.
fn window_maps(
    h: usize,
    w: usize,
    c: usize,
    win: usize,
    shift: usize,
    heads: usize,
) -> (Arc<Vec<usize>>, Arc<Vec<usize>>, usize) {
    let hp = h.div_ceil(win) * win;
    let wp = w.div_ceil(win) * win;
    let (wy_n, wx_n) = (hp / win, wp / win);
    let n_windows = wy_n * wx_n;
    let t = win * win;
    let d = c / heads;

    let mut split = vec![usize::MAX; n_windows * heads * t * d];
    let mut merge = vec![usize::MAX; h * w * c];
    for wy in 0..wy_n {
        for wx in 0..wx_n {
            let wi = wy * wx_n + wx;
            for ty in 0..win {
                for tx in 0..win {
                    let token = ty * win + tx;
                    // Padded-plane coordinate, then the cyclic shift.
                    let py = wy * win + ty;
                    let px = wx * win + tx;
                    let sy = (py + shift) % hp;
                    let sx = (px + shift) % wp;
                    if sy >= h || sx >= w {
                        continue; // padding token: zero-filled, never read back
                    }
                    for head in 0..heads {
                        for j in 0..d {
                            let tok_idx = (((wi * heads + head) * t) + token) * d + j;
                            let img_idx = (sy * w + sx) * c + head * d + j;
                            split[tok_idx] = img_idx;
                            merge[img_idx] = tok_idx;
                        }
                    }
                }
            }
        }
    }
    (Arc::new(split), Arc::new(merge), n_windows)
}

fn pw(tape: &mut Tape, x: Var, p: (Var, Var)) -> Result<Var> {
    ops::conv2d(tape, x, p.0, p.1, Padding::Same)
}

/// Windowed multi-head self-attention encoder layer with residuals, closed
/// by the branch output projection. Tokens never attend across window
/// boundaries of the (possibly shifted) partition.
pub fn global_branch(tape: &mut Tape, xhat: Var, v: &PffVars) -> Result<Var> {
    let shape = tape.shape(xhat).to_vec();
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    if c % v.heads != 0 {
        return Err(MgdnError::shape(
            "global_branch",
            format!("{c} channels not divisible by {} heads", v.heads),
        ));
    }
    let d = c / v.heads;
    let t = v.window * v.window;
    let (split, merge, n_windows) = window_maps(h, w, c, v.window, v.shift, v.heads);
    let batch = n_windows * v.heads;

    let y1 = ops::layer_norm(tape, xhat, v.ln1.0, v.ln1.1, 1e-6)?;
    let q = pw(tape, y1, v.attn_q)?;
    let k = pw(tape, y1, v.attn_k)?;
    let val = pw(tape, y1, v.attn_v)?;
    let qw = ops::gather(tape, q, split.clone(), vec![batch, t, d])?;
    let kw = ops::gather(tape, k, split.clone(), vec![batch, t, d])?;
    let vw = ops::gather(tape, val, split, vec![batch, t, d])?;

    let logits = ops::matmul(
        tape,
        qw,
        kw,
        MatSpec { mode: MatMode::NT, batch, m: t, k: d, n: t },
    )?;
    let scaled = ops::scale(tape, logits, 1.0 / (d as f64).sqrt())?;
    let probs = ops::softmax(tape, scaled, batch * t, t, 1)?;
    let mixed = ops::matmul(
        tape,
        probs,
        vw,
        MatSpec { mode: MatMode::NN, batch, m: t, k: t, n: d },
    )?;
    let attn = ops::gather(tape, mixed, merge, vec![h, w, c])?;
    let attn = pw(tape, attn, v.attn_out)?;
    let z1 = ops::add(tape, xhat, attn)?;

    let y2 = ops::layer_norm(tape, z1, v.ln2.0, v.ln2.1, 1e-6)?;
    let mid = pw(tape, y2, v.ffn1)?;
    let mid = ops::silu(tape, mid)?;
    let ffn = pw(tape, mid, v.ffn2)?;
    let z2 = ops::add(tape, z1, ffn)?;

    pw(tape, z2, v.out_proj)
}

/// Local context extractor: conv -> silu -> conv, gated per channel by a
/// sigmoid squeeze/excite head on the pooled features.
pub fn local_branch(tape: &mut Tape, xhat: Var, v: &PffVars) -> Result<Var> {
    let c = tape.shape(xhat)[2];
    let c1 = ops::conv2d(tape, xhat, v.local1.0, v.local1.1, Padding::Same)?;
    let a = ops::silu(tape, c1)?;
    let c2 = ops::conv2d(tape, a, v.local2.0, v.local2.1, Padding::Same)?;

    let pooled = ops::global_avg_pool(tape, c2)?;
    let pooled = ops::reshape(tape, pooled, vec![1, 1, c])?;
    let g = pw(tape, pooled, v.gate1)?;
    let g = ops::silu(tape, g)?;
    let g = pw(tape, g, v.gate2)?;
    let g = ops::sigmoid(tape, g)?;
    let g = ops::reshape(tape, g, vec![c])?;
    ops::mul_channels(tape, c2, g)
}

/// Fuses the filtered streams: concatenate, 1x1-project to C, then add the
/// global and local branch outputs. Returns the fused map and the merged
/// projection it was computed from.
pub fn pff_forward(tape: &mut Tape, inputs: &[Var], v: &PffVars) -> Result<(Var, Var)> {
    if inputs.is_empty() {
        return Err(MgdnError::Contract("pff_forward needs at least one input".into()));
    }
    let shape = tape.shape(inputs[0]).to_vec();
    for &i in inputs {
        if tape.shape(i) != shape {
            return Err(MgdnError::shape(
                "pff_forward",
                format!("{:?} vs {:?}", tape.shape(i), shape),
            ));
        }
    }
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    let cat = ops::concat_cols(tape, inputs, h * w)?;
    let cat = ops::reshape(tape, cat, vec![h, w, inputs.len() * c])?;
    let xhat = pw(tape, cat, v.merge)?;
    let g = global_branch(tape, xhat, v)?;
    let l = local_branch(tape, xhat, v)?;
    let m = ops::add(tape, g, l)?;
    Ok((m, xhat))
}
