//! Mutual-guided dynamic filter.
//!
//! Each input stream is filtered with per-pixel kernels predicted from
//! guidance features. Guidance comes from mutual-guided cross attention
//! (MGCA): query tokens are exchanged between the two streams, so each
//! stream's kernels are conditioned on what the *other* stream contains.
//!
//! Attention is transposed (channel-wise): logits form a C x C map per head
//! instead of an HW x HW map, and the softmax normalizes the dimension that
//! is contracted against V, so each output channel mixes value channels with
//! weights summing to one.

use std::sync::Arc;

use crate::error::{MgdnError, Result};
use crate::tensor::ops;
use crate::tensor::tape::{MatMode, MatSpec, Padding};
use crate::tensor::{Tape, Tensor, Var};

/// Per-pixel depthwise kernels, `H x W x k^2`.
#[derive(Debug, Clone)]
pub struct KernelVolume {
    values: Tensor,
    kernel_size: usize,
}

impl KernelVolume {
    pub fn new(values: Tensor, kernel_size: usize) -> Result<Self> {
        let s = values.shape();
        if s.len() != 3 || s[2] != kernel_size * kernel_size {
            return Err(MgdnError::shape(
                "KernelVolume::new",
                format!("{:?} does not end in {}^2 kernels", s, kernel_size),
            ));
        }
        if kernel_size % 2 == 0 {
            return Err(MgdnError::Contract(format!(
                "kernel size must be odd, got {kernel_size}"
            )));
        }
        Ok(KernelVolume { values, kernel_size })
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel_size
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn height(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }

    /// The `k x k` kernel applied at pixel `(y, x)`, row-major.
    pub fn kernel_at(&self, y: usize, x: usize) -> Vec<f64> {
        let k2 = self.kernel_size * self.kernel_size;
        let w = self.width();
        let base = (y * w + x) * k2;
        self.values.data()[base..base + k2].to_vec()
    }

    /// Renders kernels sampled on a `points_y x points_x` grid as one
    /// grayscale raster: each kernel becomes a `k x k` tile, normalized to
    /// [0, 1] over the whole dump, separated by 1-pixel gutters.
    pub fn render_grid(&self, points_y: usize, points_x: usize) -> Tensor {
        let k = self.kernel_size;
        let (h, w) = (self.height(), self.width());
        let mut tiles = Vec::with_capacity(points_y * points_x);
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for gy in 0..points_y {
            for gx in 0..points_x {
                let y = (2 * gy + 1) * h / (2 * points_y);
                let x = (2 * gx + 1) * w / (2 * points_x);
                let kern = self.kernel_at(y.min(h - 1), x.min(w - 1));
                for &v in &kern {
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
                tiles.push(kern);
            }
        }
        let span = if hi > lo { hi - lo } else { 1.0 };
        let oh = points_y * (k + 1) + 1;
        let ow = points_x * (k + 1) + 1;
        let mut out = Tensor::zeros(vec![oh, ow, 1]);
        for gy in 0..points_y {
            for gx in 0..points_x {
                let tile = &tiles[gy * points_x + gx];
                for dy in 0..k {
                    for dx in 0..k {
                        let py = 1 + gy * (k + 1) + dy;
                        let px = 1 + gx * (k + 1) + dx;
                        out.data_mut()[py * ow + px] = (tile[dy * k + dx] - lo) / span;
                    }
                }
            }
        }
        out
    }
}

/// Tape handles for one stream's MGCA projections.
#[derive(Debug, Clone, Copy)]
pub struct MgcaStream {
    pub ln_gamma: Var,
    pub ln_beta: Var,
    /// 1x1 projection (weight, bias) followed by a 3x3 depthwise kernel.
    pub q_pw: (Var, Var),
    pub q_dw: Var,
    pub k_pw: (Var, Var),
    pub k_dw: Var,
    pub v_pw: (Var, Var),
    pub v_dw: Var,
    pub out_pw: (Var, Var),
    /// Per-head log temperature; the attention divides logits by exp(this).
    pub log_alpha: Var,
}

/// Tape handles for a two-layer dynamic filter predictor: 3x3 conv from C
/// to C, a smooth nonlinearity, then 3x3 conv from C to k^2.
#[derive(Debug, Clone, Copy)]
pub struct PredictorVars {
    pub conv1: (Var, Var),
    pub conv2: (Var, Var),
}

/// Behavioral switches threaded through from the model configuration.
#[derive(Debug, Clone, Copy, Default)]
pub struct MgdfMode {
    /// Ablation: self queries instead of exchanged queries.
    pub self_queries: bool,
    /// Ablation: replace every pixel's kernel with the spatial mean kernel.
    pub spatially_uniform_kernels: bool,
    /// Softmax-normalize each pixel's kernel over its k^2 taps.
    pub normalize_kernels: bool,
}

fn qkv(tape: &mut Tape, x: Var, pw: (Var, Var), dw: Var) -> Result<Var> {
    let projected = ops::conv2d(tape, x, pw.0, pw.1, Padding::Same)?;
    ops::depthwise_conv2d(tape, projected, dw)
}

/// Index map from `[HW, C]` channel-last layout to head-major
/// `[heads, HW, C/heads]`, and back.
fn head_split_idx(hw: usize, c: usize, heads: usize) -> (Arc<Vec<usize>>, Arc<Vec<usize>>) {
    let d = c / heads;
    let mut split = vec![0usize; hw * c];
    let mut merge = vec![0usize; hw * c];
    for t in 0..heads {
        for p in 0..hw {
            for j in 0..d {
                let head_major = (t * hw + p) * d + j;
                let channel_last = p * c + (t * d + j);
                split[head_major] = channel_last;
                merge[channel_last] = head_major;
            }
        }
    }
    (Arc::new(split), Arc::new(merge))
}

/// Channel-wise multi-head attention: `out = V . Softmax(K^T Q / alpha)`,
/// with Q possibly coming from the other stream. Returns the attention
/// output shaped `[H, W, C]` and the per-head `C/h x C/h` mixing maps.
pub fn transposed_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    log_alpha: Var,
    heads: usize,
) -> Result<(Var, Var)> {
    let shape = tape.shape(v).to_vec();
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    if c % heads != 0 {
        return Err(MgdnError::shape(
            "transposed_attention",
            format!("{c} channels not divisible by {heads} heads"),
        ));
    }
    if tape.numel(log_alpha) != heads {
        return Err(MgdnError::shape(
            "transposed_attention",
            format!("log_alpha has {} entries for {heads} heads", tape.numel(log_alpha)),
        ));
    }
    let hw = h * w;
    let d = c / heads;
    let (split, merge) = head_split_idx(hw, c, heads);
    let qh = ops::gather(tape, q, split.clone(), vec![heads, hw, d])?;
    let kh = ops::gather(tape, k, split.clone(), vec![heads, hw, d])?;
    let vh = ops::gather(tape, v, split, vec![heads, hw, d])?;

    // K^T Q per head: logits[c_k, c_q] = sum_p K[p, c_k] * Q[p, c_q].
    let logits = ops::matmul(
        tape,
        kh,
        qh,
        MatSpec { mode: MatMode::TN, batch: heads, m: d, k: hw, n: d },
    )?;
    let neg = ops::scale(tape, log_alpha, -1.0)?;
    let inv_alpha = ops::exp(tape, neg)?;
    let inv_wide = ops::broadcast_axis(tape, inv_alpha, heads, d * d, 1)?;
    let inv_wide = ops::reshape(tape, inv_wide, vec![heads, d, d])?;
    let scaled = ops::mul(tape, logits, inv_wide)?;
    // Normalize the dimension contracted against V: each output channel's
    // mixing weights sum to one.
    let probs = ops::softmax(tape, scaled, heads, d, d)?;
    let mixed = ops::matmul(
        tape,
        vh,
        probs,
        MatSpec { mode: MatMode::NN, batch: heads, m: hw, k: d, n: d },
    )?;
    let out = ops::gather(tape, mixed, merge, vec![h, w, c])?;
    Ok((out, probs))
}

/// Mutual-guided cross attention over a stream pair (Eq. 1 wiring):
/// `G1 = W_out1(Attention(Q2, K1, V1)) + F1` and vice versa. With
/// `self_queries` the query exchange is disabled (plain transposed
/// self-attention, used by the ablation).
pub fn mgca_forward(
    tape: &mut Tape,
    f1: Var,
    f2: Var,
    s1: &MgcaStream,
    s2: &MgcaStream,
    heads: usize,
    self_queries: bool,
) -> Result<(Var, Var)> {
    if tape.shape(f1) != tape.shape(f2) {
        return Err(MgdnError::shape(
            "mgca_forward",
            format!("{:?} vs {:?}", tape.shape(f1), tape.shape(f2)),
        ));
    }
    let x1 = ops::layer_norm(tape, f1, s1.ln_gamma, s1.ln_beta, 1e-6)?;
    let x2 = ops::layer_norm(tape, f2, s2.ln_gamma, s2.ln_beta, 1e-6)?;
    let q1 = qkv(tape, x1, s1.q_pw, s1.q_dw)?;
    let k1 = qkv(tape, x1, s1.k_pw, s1.k_dw)?;
    let v1 = qkv(tape, x1, s1.v_pw, s1.v_dw)?;
    let q2 = qkv(tape, x2, s2.q_pw, s2.q_dw)?;
    let k2 = qkv(tape, x2, s2.k_pw, s2.k_dw)?;
    let v2 = qkv(tape, x2, s2.v_pw, s2.v_dw)?;

    let (qa, qb) = if self_queries { (q1, q2) } else { (q2, q1) };
    let (a1, _) = transposed_attention(tape, qa, k1, v1, s1.log_alpha, heads)?;
    let (a2, _) = transposed_attention(tape, qb, k2, v2, s2.log_alpha, heads)?;
    let p1 = ops::conv2d(tape, a1, s1.out_pw.0, s1.out_pw.1, Padding::Same)?;
    let p2 = ops::conv2d(tape, a2, s2.out_pw.0, s2.out_pw.1, Padding::Same)?;
    let g1 = ops::add(tape, p1, f1)?;
    let g2 = ops::add(tape, p2, f2)?;
    Ok((g1, g2))
}

/// Predicts a raw (unnormalized) kernel volume `H x W x k^2` from guidance
/// features.
pub fn predict_kernel_volume(tape: &mut Tape, g: Var, p: &PredictorVars) -> Result<Var> {
    let mid = ops::conv2d(tape, g, p.conv1.0, p.conv1.1, Padding::Same)?;
    let mid = ops::silu(tape, mid)?;
    ops::conv2d(tape, mid, p.conv2.0, p.conv2.1, Padding::Same)
}

/// Filters `f` with the per-pixel kernels in `kv` (depthwise: one kernel
/// per pixel shared across channels, zero padding at borders).
pub fn apply_dynamic_filter(tape: &mut Tape, f: Var, kv: Var) -> Result<Var> {
    ops::dynamic_filter(tape, f, kv)
}

/// One stream pair through the full MGDF block.
pub struct MgdfOut {
    /// Filtered features `C_i`.
    pub filtered: [Var; 2],
    /// Guidance features `G_i` (exposed for the loss and diagnostics).
    pub guided: [Var; 2],
    /// Kernel volumes `KV_i` (exposed for visualization).
    pub kernels: [Var; 2],
}

/// MGCA -> kernel prediction -> dynamic filtering for a pair of streams.
pub fn mgdf_forward(
    tape: &mut Tape,
    f1: Var,
    f2: Var,
    s1: &MgcaStream,
    s2: &MgcaStream,
    pred1: &PredictorVars,
    pred2: &PredictorVars,
    heads: usize,
    mode: MgdfMode,
) -> Result<MgdfOut> {
    let (g1, g2) = mgca_forward(tape, f1, f2, s1, s2, heads, mode.self_queries)?;
    let raw1 = predict_kernel_volume(tape, g1, pred1)?;
    let kv1 = finalize_kernels(tape, raw1, mode)?;
    let raw2 = predict_kernel_volume(tape, g2, pred2)?;
    let kv2 = finalize_kernels(tape, raw2, mode)?;
    let c1 = apply_dynamic_filter(tape, f1, kv1)?;
    let c2 = apply_dynamic_filter(tape, f2, kv2)?;
    Ok(MgdfOut {
        filtered: [c1, c2],
        guided: [g1, g2],
        kernels: [kv1, kv2],
    })
}

/// Applies the spatial-uniformity ablation and optional per-pixel softmax
/// normalization to a raw kernel volume.
pub fn finalize_kernels(tape: &mut Tape, kv: Var, mode: MgdfMode) -> Result<Var> {
    let shape = tape.shape(kv).to_vec();
    let (h, w, k2) = (shape[0], shape[1], shape[2]);
    let mut kv = kv;
    if mode.spatially_uniform_kernels {
        // Every pixel shares the mean kernel; parameters stay in the graph.
        let mean = ops::global_avg_pool(tape, kv)?;
        let wide = ops::broadcast_axis(tape, mean, 1, h * w, k2)?;
        kv = ops::reshape(tape, wide, vec![h, w, k2])?;
    }
    if mode.normalize_kernels {
        kv = ops::softmax(tape, kv, h * w, k2, 1)?;
    }
    Ok(kv)
}
