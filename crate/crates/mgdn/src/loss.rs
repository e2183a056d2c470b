//! Masked mutual-information loss and the total training losses.
//!
//! Per stage, the filtered features are projected to single channels
//! (S1, S2), a soft similarity mask GM is predicted from their Sobel
//! gradients, and the masked "uncommon" features `T_i = S_i * (1 - GM)` are
//! pushed through a differentiable joint histogram. The loss is the NMI
//! redundancy `2 * (1 - H(T1,T2) / (H(T1) + H(T2)))`: zero for independent
//! features, one for deterministic dependence. Minimizing it removes
//! redundancy where the mask says structure is *not* shared.

use crate::error::{MgdnError, Result};
use crate::tensor::ops;
use crate::tensor::tape::Padding;
use crate::tensor::{Tape, Var};

/// Differentiable-histogram settings.
#[derive(Debug, Clone, Copy)]
pub struct SoftHistogramConfig {
    pub bins: usize,
    /// Gaussian bandwidth as a multiple of the bin width.
    pub sigma_scale: f64,
}

impl Default for SoftHistogramConfig {
    fn default() -> Self {
        SoftHistogramConfig { bins: 32, sigma_scale: 1.5 }
    }
}

/// Tape handles for the mask net: two 3x3 convolutions over the four
/// stacked Sobel responses, then a sigmoid.
#[derive(Debug, Clone, Copy)]
pub struct MaskNetVars {
    pub conv1: (Var, Var),
    pub conv2: (Var, Var),
}

/// Mask-net mid width (stacked gradients -> MASK_MID -> 1).
pub const MASK_MID: usize = 8;
/// Entropy floor for `0 log 0`.
pub const ENTROPY_EPS: f64 = 1e-12;

fn expect_single_channel(tape: &Tape, v: Var, op: &'static str) -> Result<(usize, usize)> {
    let s = tape.shape(v);
    if s.len() != 3 || s[2] != 1 {
        return Err(MgdnError::shape(op, format!("want [H,W,1], got {:?}", s)));
    }
    Ok((s[0], s[1]))
}

/// Horizontal and vertical Sobel responses of a single-channel map
/// (zero padding).
pub fn sobel_gradients(tape: &mut Tape, s: Var) -> Result<(Var, Var)> {
    expect_single_channel(tape, s, "sobel_gradients")?;
    let gx_k = tape.constant(
        vec![-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0],
        vec![3, 3, 1],
    );
    let gy_k = tape.constant(
        vec![-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0],
        vec![3, 3, 1],
    );
    let gx = ops::depthwise_conv2d(tape, s, gx_k)?;
    let gy = ops::depthwise_conv2d(tape, s, gy_k)?;
    Ok((gx, gy))
}

/// Soft similarity mask in (0, 1): high where the two maps share gradient
/// structure worth protecting from MI minimization.
pub fn predict_gradient_mask(tape: &mut Tape, s1: Var, s2: Var, net: &MaskNetVars) -> Result<Var> {
    let (h, w) = expect_single_channel(tape, s1, "predict_gradient_mask")?;
    if tape.shape(s1) != tape.shape(s2) {
        return Err(MgdnError::shape(
            "predict_gradient_mask",
            format!("{:?} vs {:?}", tape.shape(s1), tape.shape(s2)),
        ));
    }
    let (gx1, gy1) = sobel_gradients(tape, s1)?;
    let (gx2, gy2) = sobel_gradients(tape, s2)?;
    let stacked = ops::concat_cols(tape, &[gx1, gy1, gx2, gy2], h * w)?;
    let stacked = ops::reshape(tape, stacked, vec![h, w, 4])?;
    let mid = ops::conv2d(tape, stacked, net.conv1.0, net.conv1.1, Padding::Same)?;
    let mid = ops::silu(tape, mid)?;
    let logits = ops::conv2d(tape, mid, net.conv2.0, net.conv2.1, Padding::Same)?;
    ops::sigmoid(tape, logits)
}

/// Selects the uncommon part of a feature map: `T = S * (1 - GM)`.
pub fn mask_uncommon(tape: &mut Tape, s: Var, gm: Var) -> Result<Var> {
    let inv = ops::one_minus(tape, gm)?;
    ops::mul(tape, s, inv)
}

/// `(p1, p2, p12)` from the differentiable joint histogram; `None` when a
/// degenerate (constant) input makes the range collapse.
pub fn soft_joint_histogram(
    tape: &mut Tape,
    t1: Var,
    t2: Var,
    cfg: &SoftHistogramConfig,
) -> Result<Option<(Var, Var, Var)>> {
    let Some(hist) = ops::soft_joint_hist(tape, t1, t2, cfg.bins, cfg.sigma_scale)? else {
        return Ok(None);
    };
    let p1 = ops::sum_axis(tape, hist.joint, cfg.bins, cfg.bins, 1)?;
    let p2 = ops::sum_axis(tape, hist.joint, 1, cfg.bins, cfg.bins)?;
    Ok(Some((p1, p2, hist.joint)))
}

/// Shannon entropy of a probability vector/matrix on the tape (nats).
pub fn entropy(tape: &mut Tape, p: Var) -> Result<Var> {
    ops::entropy(tape, p, ENTROPY_EPS)
}

/// One masked-MI term.
pub struct MaskedMiTerm {
    /// Scalar loss in [0, 1]; a zero constant on the degenerate path.
    pub loss: Var,
    /// The predicted mask `GM`, for visualization.
    pub mask: Var,
    /// True when the histogram degenerated and the term carries no gradient.
    pub degenerate: bool,
}

/// Masked NMI redundancy between two single-channel feature maps:
/// mask, select uncommon features, histogram, then
/// `2 * (1 - H12 / (H1 + H2))`.
pub fn masked_mi_loss(
    tape: &mut Tape,
    s1: Var,
    s2: Var,
    net: &MaskNetVars,
    cfg: &SoftHistogramConfig,
) -> Result<MaskedMiTerm> {
    let gm = predict_gradient_mask(tape, s1, s2, net)?;
    let t1 = mask_uncommon(tape, s1, gm)?;
    let t2 = mask_uncommon(tape, s2, gm)?;
    match soft_joint_histogram(tape, t1, t2, cfg)? {
        Some((p1, p2, p12)) => {
            let h12 = entropy(tape, p12)?;
            let h1 = entropy(tape, p1)?;
            let h2 = entropy(tape, p2)?;
            let denom = ops::add(tape, h1, h2)?;
            let ratio = ops::div(tape, h12, denom)?;
            let loss = ops::affine(tape, ratio, -2.0, 2.0)?;
            Ok(MaskedMiTerm { loss, mask: gm, degenerate: false })
        }
        None => {
            log::warn!("masked MI histogram degenerated (constant masked features); term contributes 0");
            let loss = tape.scalar(0.0);
            Ok(MaskedMiTerm { loss, mask: gm, degenerate: true })
        }
    }
}

/// One stage's single-channel features and its mask net.
pub struct StagePair {
    pub s1: Var,
    pub s2: Var,
    pub net: MaskNetVars,
}

/// Total loss pieces. `total = l1 + lambda * mi`.
pub struct LossVars {
    pub total: Var,
    pub l1: Var,
    pub mi: Var,
    /// One mask per stage and pair, for dumping.
    pub masks: Vec<Var>,
    /// For the three-stream loss: the two per-pair MI sums
    /// (reference-vs-under, reference-vs-over).
    pub mi_pairs: Option<(Var, Var)>,
}

fn l1_mean(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let d = ops::sub(tape, a, b)?;
    let d = ops::abs(tape, d)?;
    ops::mean_all(tape, d)
}

/// Two-stream training loss: `|Io - GT|_1 + lambda * sum_n MaskMI(S1, S2)`.
pub fn fusion_loss(
    tape: &mut Tape,
    io: Var,
    gt: Var,
    stages: &[StagePair],
    lambda: f64,
    cfg: &SoftHistogramConfig,
) -> Result<LossVars> {
    if tape.shape(io) != tape.shape(gt) {
        return Err(MgdnError::shape(
            "fusion_loss",
            format!("{:?} vs {:?}", tape.shape(io), tape.shape(gt)),
        ));
    }
    let l1 = l1_mean(tape, io, gt)?;
    let mut masks = Vec::new();
    let mi = if lambda == 0.0 {
        tape.scalar(0.0)
    } else {
        let mut acc: Option<Var> = None;
        for st in stages {
            let term = masked_mi_loss(tape, st.s1, st.s2, &st.net, cfg)?;
            masks.push(term.mask);
            acc = Some(match acc {
                Some(a) => ops::add(tape, a, term.loss)?,
                None => term.loss,
            });
        }
        acc.unwrap_or_else(|| tape.scalar(0.0))
    };
    let weighted = ops::scale(tape, mi, lambda)?;
    let total = ops::add(tape, l1, weighted)?;
    Ok(LossVars { total, l1, mi, masks, mi_pairs: None })
}

/// One stage's three single-channel features; index 1 is the reference
/// (normal-exposure) stream.
pub struct StageTriple {
    pub s: [Var; 3],
    pub net: MaskNetVars,
}

/// Three-stream loss: tonemapped L1 plus
/// `lambda * sum_n [MaskMI(S2, S1) + MaskMI(S2, S3)]`.
pub fn hdr_loss(
    tape: &mut Tape,
    io: Var,
    gt: Var,
    stages: &[StageTriple],
    lambda: f64,
    cfg: &SoftHistogramConfig,
    mu: f64,
) -> Result<LossVars> {
    if tape.shape(io) != tape.shape(gt) {
        return Err(MgdnError::shape(
            "hdr_loss",
            format!("{:?} vs {:?}", tape.shape(io), tape.shape(gt)),
        ));
    }
    let io_tm = ops::mu_law(tape, io, mu)?;
    let gt_tm = ops::mu_law(tape, gt, mu)?;
    let l1 = l1_mean(tape, io_tm, gt_tm)?;

    let mut masks = Vec::new();
    let (mi, pairs) = if lambda == 0.0 {
        (tape.scalar(0.0), None)
    } else {
        let mut under: Option<Var> = None;
        let mut over: Option<Var> = None;
        for st in stages {
            let a = masked_mi_loss(tape, st.s[1], st.s[0], &st.net, cfg)?;
            let b = masked_mi_loss(tape, st.s[1], st.s[2], &st.net, cfg)?;
            masks.push(a.mask);
            masks.push(b.mask);
            under = Some(match under {
                Some(u) => ops::add(tape, u, a.loss)?,
                None => a.loss,
            });
            over = Some(match over {
                Some(o) => ops::add(tape, o, b.loss)?,
                None => b.loss,
            });
        }
        match (under, over) {
            (Some(u), Some(o)) => (ops::add(tape, u, o)?, Some((u, o))),
            _ => (tape.scalar(0.0), None),
        }
    };
    let weighted = ops::scale(tape, mi, lambda)?;
    let total = ops::add(tape, l1, weighted)?;
    Ok(LossVars { total, l1, mi, masks, mi_pairs: pairs })
}

// --- Plain (non-tape) probability helpers, used by tests and diagnostics ---

fn floor_ln(v: f64) -> f64 {
    v.max(ENTROPY_EPS).ln()
}

/// `-sum p ln p` in nats, with the same epsilon floor as the tape op.
pub fn entropy_of(p: &[f64]) -> f64 {
    p.iter().map(|&pi| -pi * floor_ln(pi)).sum()
}

/// Cross entropy `-sum p ln q`.
pub fn cross_entropy(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(&pi, &qi)| -pi * floor_ln(qi)).sum()
}

/// Kullback-Leibler divergence `sum p ln(p/q)`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&pi, &qi)| pi * (floor_ln(pi) - floor_ln(qi)))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{finite_diff_check, FiniteDiff};
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect()
    }

    fn mask_net_data(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let fan1: f64 = 9.0 * 4.0;
        let fan2: f64 = 9.0 * MASK_MID as f64;
        (
            rand_vec(rng, 9 * 4 * MASK_MID).iter().map(|v| v / fan1.sqrt()).collect(),
            vec![0.0; MASK_MID],
            rand_vec(rng, 9 * MASK_MID).iter().map(|v| v / fan2.sqrt()).collect(),
            vec![0.0; 1],
        )
    }

    fn lease_mask_net(
        tape: &mut Tape,
        data: &(Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>),
        grad: bool,
    ) -> MaskNetVars {
        MaskNetVars {
            conv1: (
                tape.leaf(data.0.clone(), vec![3, 3, 4, MASK_MID], grad),
                tape.leaf(data.1.clone(), vec![MASK_MID], grad),
            ),
            conv2: (
                tape.leaf(data.2.clone(), vec![3, 3, MASK_MID, 1], grad),
                tape.leaf(data.3.clone(), vec![1], grad),
            ),
        }
    }

    fn zero_mask_net(tape: &mut Tape) -> MaskNetVars {
        MaskNetVars {
            conv1: (
                tape.constant(vec![0.0; 9 * 4 * MASK_MID], vec![3, 3, 4, MASK_MID]),
                tape.constant(vec![0.0; MASK_MID], vec![MASK_MID]),
            ),
            conv2: (
                tape.constant(vec![0.0; 9 * MASK_MID], vec![3, 3, MASK_MID, 1]),
                tape.constant(vec![0.0], vec![1]),
            ),
        }
    }

    /// Values cycling through evenly spaced levels whose endpoints sit on
    /// the quantized histogram grid, so every value lands exactly on a bin
    /// center.
    fn bin_centered_values(n: usize, bins: usize) -> Vec<f64> {
        (0..n).map(|i| (i % bins) as f64 / (bins - 1) as f64).collect()
    }

    #[test]
    fn sobel_of_constant_is_zero() {
        let mut tape = Tape::new();
        let s = tape.constant(vec![3.3; 30], vec![5, 6, 1]);
        let (gx, gy) = sobel_gradients(&mut tape, s).unwrap();
        for y in 1..4 {
            for x in 1..5 {
                assert!(tape.value(gx)[y * 6 + x].abs() <= 1e-12);
                assert!(tape.value(gy)[y * 6 + x].abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn sobel_of_ramp_and_step() {
        // Horizontal unit ramp: gy = 0, gx = 8 * slope in the interior.
        let (h, w) = (5, 7);
        let slope = 0.25;
        let ramp: Vec<f64> = (0..h * w).map(|i| (i % w) as f64 * slope).collect();
        let mut tape = Tape::new();
        let s = tape.constant(ramp, vec![h, w, 1]);
        let (gx, gy) = sobel_gradients(&mut tape, s).unwrap();
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                assert!((tape.value(gx)[y * w + x] - 8.0 * slope).abs() <= 1e-12);
                assert!(tape.value(gy)[y * w + x].abs() <= 1e-12);
            }
        }

        // Vertical step edge at column 3: the interior gx response is the
        // hand-computed 3x3 correlation value 4 * step in adjacent columns.
        let step: Vec<f64> = (0..h * w).map(|i| if i % w >= 3 { 1.0 } else { 0.0 }).collect();
        let s = tape.constant(step, vec![h, w, 1]);
        let (gx, _) = sobel_gradients(&mut tape, s).unwrap();
        for y in 1..h - 1 {
            assert!((tape.value(gx)[y * w + 2] - 4.0).abs() <= 1e-12);
            assert!((tape.value(gx)[y * w + 3] - 4.0).abs() <= 1e-12);
            assert!(tape.value(gx)[y * w + 1].abs() <= 1e-12);
            assert!(tape.value(gx)[y * w + 5].abs() <= 1e-12);
        }
    }

    #[test]
    fn sobel_rejects_multichannel() {
        let mut tape = Tape::new();
        let s = tape.constant(vec![0.0; 4 * 4 * 2], vec![4, 4, 2]);
        assert!(sobel_gradients(&mut tape, s).is_err());
    }

    #[test]
    fn zero_mask_net_yields_half_everywhere() {
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        let mut tape = Tape::new();
        let s1 = tape.constant(rand_vec(&mut rng, 25), vec![5, 5, 1]);
        let s2 = tape.constant(rand_vec(&mut rng, 25), vec![5, 5, 1]);
        let net = zero_mask_net(&mut tape);
        let gm = predict_gradient_mask(&mut tape, s1, s2, &net).unwrap();
        assert!(tape.value(gm).iter().all(|&v| v == 0.5));
    }

    #[test]
    fn mask_stays_strictly_inside_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        for _ in 0..10 {
            let mut tape = Tape::new();
            let s1 = tape.constant(rand_vec(&mut rng, 36), vec![6, 6, 1]);
            let s2 = tape.constant(rand_vec(&mut rng, 36), vec![6, 6, 1]);
            let data = mask_net_data(&mut rng);
            let net = lease_mask_net(&mut tape, &data, false);
            let gm = predict_gradient_mask(&mut tape, s1, s2, &net).unwrap();
            assert!(tape.value(gm).iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn mask_matches_composition_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        let (h, w) = (5, 4);
        let s1v = rand_vec(&mut rng, h * w);
        let s2v = rand_vec(&mut rng, h * w);
        let data = mask_net_data(&mut rng);

        let mut tape = Tape::new();
        let s1 = tape.constant(s1v.clone(), vec![h, w, 1]);
        let s2 = tape.constant(s2v.clone(), vec![h, w, 1]);
        let net = lease_mask_net(&mut tape, &data, false);
        let gm = predict_gradient_mask(&mut tape, s1, s2, &net).unwrap();

        // Independent pipeline: loop Sobel -> stack -> conv -> silu -> conv
        // -> sigmoid.
        let conv3 = |x: &[f64], wm: &[f64], b: &[f64], cin: usize, cout: usize| -> Vec<f64> {
            let mut out = vec![0.0; h * w * cout];
            for y in 0..h {
                for xx in 0..w {
                    for co in 0..cout {
                        let mut s = b[co];
                        for dy in 0..3_isize {
                            for dx in 0..3_isize {
                                let iy = y as isize + dy - 1;
                                let ix = xx as isize + dx - 1;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                for ci in 0..cin {
                                    s += x[(iy as usize * w + ix as usize) * cin + ci]
                                        * wm[((dy as usize * 3 + dx as usize) * cin + ci) * cout + co];
                                }
                            }
                        }
                        out[(y * w + xx) * cout + co] = s;
                    }
                }
            }
            out
        };
        let sobel = |x: &[f64], kern: [[f64; 3]; 3]| -> Vec<f64> {
            let mut out = vec![0.0; h * w];
            for y in 0..h {
                for xx in 0..w {
                    let mut s = 0.0;
                    for dy in 0..3_isize {
                        for dx in 0..3_isize {
                            let iy = y as isize + dy - 1;
                            let ix = xx as isize + dx - 1;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            s += x[iy as usize * w + ix as usize]
                                * kern[dy as usize][dx as usize];
                        }
                    }
                    out[y * w + xx] = s;
                }
            }
            out
        };
        let gxk = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
        let gyk = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];
        let (gx1, gy1) = (sobel(&s1v, gxk), sobel(&s1v, gyk));
        let (gx2, gy2) = (sobel(&s2v, gxk), sobel(&s2v, gyk));
        let mut stacked = vec![0.0; h * w * 4];
        for p in 0..h * w {
            stacked[p * 4] = gx1[p];
            stacked[p * 4 + 1] = gy1[p];
            stacked[p * 4 + 2] = gx2[p];
            stacked[p * 4 + 3] = gy2[p];
        }
        let mid = conv3(&stacked, &data.0, &data.1, 4, MASK_MID);
        let mid: Vec<f64> = mid
            .iter()
            .map(|&v| v * crate::tensor::ops::sigmoid_scalar(v))
            .collect();
        let logits = conv3(&mid, &data.2, &data.3, MASK_MID, 1);
        for (got, l) in tape.value(gm).iter().zip(&logits) {
            let want = crate::tensor::ops::sigmoid_scalar(*l);
            assert!((got - want).abs() <= 1e-10);
        }
    }

    #[test]
    fn mask_uncommon_arithmetic() {
        let mut tape = Tape::new();
        let s = tape.constant(vec![2.0, 2.0, 2.0], vec![3]);
        let ones = tape.constant(vec![1.0; 3], vec![3]);
        let zeros = tape.constant(vec![0.0; 3], vec![3]);
        let half = tape.constant(vec![0.5; 3], vec![3]);
        let t = mask_uncommon(&mut tape, s, ones).unwrap();
        assert_eq!(tape.value(t), &[0.0; 3]);
        let t = mask_uncommon(&mut tape, s, zeros).unwrap();
        assert_eq!(tape.value(t), &[2.0; 3]);
        let t = mask_uncommon(&mut tape, s, half).unwrap();
        assert_eq!(tape.value(t), &[1.0; 3]);
    }

    #[test]
    fn cross_entropy_minus_kl_is_entropy() {
        // The marginal-entropy identity, on 100 random distribution pairs.
        let mut rng = ChaCha8Rng::seed_from_u64(63);
        for _ in 0..100 {
            let n = 2 + (rng.gen::<usize>() % 14);
            let normalize = |mut v: Vec<f64>| -> Vec<f64> {
                let s: f64 = v.iter().sum();
                v.iter_mut().for_each(|x| *x /= s);
                v
            };
            let p = normalize((0..n).map(|_| rng.gen::<f64>() + 1e-3).collect());
            let q = normalize((0..n).map(|_| rng.gen::<f64>() + 1e-3).collect());
            let lhs = cross_entropy(&p, &q) - kl_divergence(&p, &q);
            assert!((lhs - entropy_of(&p)).abs() <= 1e-10);
        }
    }

    #[test]
    fn nmi_formula_matches_independent_arithmetic() {
        // Hand-built 2x2 joint [[0.4, 0.1], [0.1, 0.4]]; the expected values
        // were computed independently with 30-digit arithmetic:
        //   H12 = 1.19354960409813, H1 = H2 = ln 2,
        //   loss = 2 * (1 - H12 / (2 ln 2)) = 0.278071905112638.
        let mut tape = Tape::new();
        let p12 = tape.constant(vec![0.4, 0.1, 0.1, 0.4], vec![2, 2]);
        let p1 = ops::sum_axis(&mut tape, p12, 2, 2, 1).unwrap();
        let p2 = ops::sum_axis(&mut tape, p12, 1, 2, 2).unwrap();
        let h12 = entropy(&mut tape, p12).unwrap();
        let h1 = entropy(&mut tape, p1).unwrap();
        let h2 = entropy(&mut tape, p2).unwrap();
        let denom = ops::add(&mut tape, h1, h2).unwrap();
        let ratio = ops::div(&mut tape, h12, denom).unwrap();
        let loss = ops::affine(&mut tape, ratio, -2.0, 2.0).unwrap();
        assert!((tape.value(h12)[0] - 1.193_549_604_098_133).abs() <= 1e-12);
        assert!((tape.value(denom)[0] - 2.0 * std::f64::consts::LN_2).abs() <= 1e-12);
        assert!((tape.value(loss)[0] - 0.278_071_905_112_638).abs() <= 1e-12);
    }

    #[test]
    fn identical_features_give_loss_one() {
        // S1 == S2 with values on bin centers and a sharp histogram: the
        // joint is diagonal and the loss is exactly one.
        let (h, w) = (8, 8);
        let cfg = SoftHistogramConfig { bins: 16, sigma_scale: 0.02 };
        let vals = bin_centered_values(h * w, cfg.bins);
        let mut tape = Tape::new();
        let s1 = tape.constant(vals.clone(), vec![h, w, 1]);
        let s2 = tape.constant(vals, vec![h, w, 1]);
        let net = zero_mask_net(&mut tape);
        let term = masked_mi_loss(&mut tape, s1, s2, &net, &cfg).unwrap();
        assert!(!term.degenerate);
        assert!((tape.value(term.loss)[0] - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn independent_features_give_loss_zero() {
        // Every (a, b) bin pair occurs exactly once: the joint histogram is
        // the product of its marginals, so the loss vanishes.
        let bins = 8;
        let (h, w) = (8, 8);
        let cfg = SoftHistogramConfig { bins, sigma_scale: 0.02 };
        let mut v1 = vec![0.0; h * w];
        let mut v2 = vec![0.0; h * w];
        for a in 0..bins {
            for b in 0..bins {
                v1[a * bins + b] = a as f64 / (bins - 1) as f64;
                v2[a * bins + b] = b as f64 / (bins - 1) as f64;
            }
        }
        let mut tape = Tape::new();
        let s1 = tape.constant(v1, vec![h, w, 1]);
        let s2 = tape.constant(v2, vec![h, w, 1]);
        let net = zero_mask_net(&mut tape);
        let term = masked_mi_loss(&mut tape, s1, s2, &net, &cfg).unwrap();
        assert!(tape.value(term.loss)[0].abs() <= 1e-9);
    }

    #[test]
    fn loss_stays_in_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(64);
        let cfg = SoftHistogramConfig::default();
        for _ in 0..20 {
            let mut tape = Tape::new();
            let s1 = tape.constant(rand_vec(&mut rng, 64), vec![8, 8, 1]);
            let s2 = tape.constant(rand_vec(&mut rng, 64), vec![8, 8, 1]);
            let data = mask_net_data(&mut rng);
            let net = lease_mask_net(&mut tape, &data, false);
            let term = masked_mi_loss(&mut tape, s1, s2, &net, &cfg).unwrap();
            let v = tape.value(term.loss)[0];
            assert!((0.0..=1.0).contains(&v), "loss {v} outside [0,1]");
        }
    }

    #[test]
    fn saturated_mask_degenerates_to_zero() {
        // A mask-net bias of +50 saturates the sigmoid to exactly 1.0 in
        // f64, so T = 0 and the degenerate path reports zero loss.
        let mut rng = ChaCha8Rng::seed_from_u64(65);
        let mut tape = Tape::new();
        let s1 = tape.constant(rand_vec(&mut rng, 36), vec![6, 6, 1]);
        let s2 = tape.constant(rand_vec(&mut rng, 36), vec![6, 6, 1]);
        let net = MaskNetVars {
            conv1: (
                tape.constant(vec![0.0; 9 * 4 * MASK_MID], vec![3, 3, 4, MASK_MID]),
                tape.constant(vec![0.0; MASK_MID], vec![MASK_MID]),
            ),
            conv2: (
                tape.constant(vec![0.0; 9 * MASK_MID], vec![3, 3, MASK_MID, 1]),
                tape.constant(vec![50.0], vec![1]),
            ),
        };
        let term = masked_mi_loss(&mut tape, s1, s2, &net, &SoftHistogramConfig::default()).unwrap();
        assert!(term.degenerate);
        assert_eq!(tape.value(term.loss)[0], 0.0);
        assert!(tape.value(term.mask).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn masked_mi_gradients_pass_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(66);
        let (h, w) = (8, 8);
        let s1 = Tensor::from_vec(vec![h, w, 1], rand_vec(&mut rng, h * w)).unwrap();
        let s2 = Tensor::from_vec(vec![h, w, 1], rand_vec(&mut rng, h * w)).unwrap();
        let data = mask_net_data(&mut rng);
        let params = vec![
            s1,
            s2,
            Tensor::from_vec(vec![3, 3, 4, MASK_MID], data.0.clone()).unwrap(),
            Tensor::from_vec(vec![MASK_MID], data.1.clone()).unwrap(),
            Tensor::from_vec(vec![3, 3, MASK_MID, 1], data.2.clone()).unwrap(),
            Tensor::from_vec(vec![1], data.3.clone()).unwrap(),
        ];
        let build = |tape: &mut Tape, vars: &[Var]| {
            let net = MaskNetVars {
                conv1: (vars[2], vars[3]),
                conv2: (vars[4], vars[5]),
            };
            let term = masked_mi_loss(tape, vars[0], vars[1], &net, &SoftHistogramConfig::default())?;
            Ok(term.loss)
        };
        let err = finite_diff_check(
            &build,
            &params,
            &FiniteDiff { epsilon: 1e-5, max_coords_per_tensor: 10 },
        )
        .unwrap();
        assert!(err <= 1e-3, "masked MI gradient error {err:e}");
    }

    #[test]
    fn fusion_loss_trivial_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(67);
        let gt_v = rand_vec(&mut rng, 27);
        let mut tape = Tape::new();
        let gt = tape.constant(gt_v.clone(), vec![3, 3, 3]);
        let io_same = tape.constant(gt_v.clone(), vec![3, 3, 3]);
        let cfg = SoftHistogramConfig::default();
        let out = fusion_loss(&mut tape, io_same, gt, &[], 0.0, &cfg).unwrap();
        assert_eq!(tape.value(out.total)[0], 0.0);

        let io_off = tape.constant(gt_v.iter().map(|v| v + 1.0).collect(), vec![3, 3, 3]);
        let out = fusion_loss(&mut tape, io_off, gt, &[], 0.0, &cfg).unwrap();
        assert!((tape.value(out.total)[0] - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn fusion_loss_matches_hand_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(68);
        let (h, w) = (6, 6);
        let lambda = 0.1;
        let cfg = SoftHistogramConfig::default();
        let gt_v = rand_vec(&mut rng, h * w * 2);
        let io_v = rand_vec(&mut rng, h * w * 2);
        let nets: Vec<_> = (0..2).map(|_| mask_net_data(&mut rng)).collect();
        let s_vals: Vec<Vec<f64>> = (0..4).map(|_| rand_vec(&mut rng, h * w)).collect();

        let mut tape = Tape::new();
        let io = tape.constant(io_v.clone(), vec![h, w, 2]);
        let gt = tape.constant(gt_v.clone(), vec![h, w, 2]);
        let stages: Vec<StagePair> = (0..2)
            .map(|n| StagePair {
                s1: tape.constant(s_vals[2 * n].clone(), vec![h, w, 1]),
                s2: tape.constant(s_vals[2 * n + 1].clone(), vec![h, w, 1]),
                net: lease_mask_net(&mut tape, &nets[n], false),
            })
            .collect();
        let out = fusion_loss(&mut tape, io, gt, &stages, lambda, &cfg).unwrap();

        let l1_hand: f64 = io_v
            .iter()
            .zip(&gt_v)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / (h * w * 2) as f64;
        // Recompute the per-stage MI terms independently on a fresh tape.
        let mut mi_hand = 0.0;
        for n in 0..2 {
            let mut t2 = Tape::new();
            let s1 = t2.constant(s_vals[2 * n].clone(), vec![h, w, 1]);
            let s2 = t2.constant(s_vals[2 * n + 1].clone(), vec![h, w, 1]);
            let net = lease_mask_net(&mut t2, &nets[n], false);
            let term = masked_mi_loss(&mut t2, s1, s2, &net, &cfg).unwrap();
            mi_hand += t2.value(term.loss)[0];
        }
        let want = l1_hand + lambda * mi_hand;
        assert!((tape.value(out.total)[0] - want).abs() <= 1e-12);
        assert!((tape.value(out.l1)[0] - l1_hand).abs() <= 1e-12);
        assert!((tape.value(out.mi)[0] - mi_hand).abs() <= 1e-12);
    }

    #[test]
    fn hdr_loss_identical_triples_and_lambda_zero() {
        let (h, w) = (8, 8);
        let cfg = SoftHistogramConfig { bins: 16, sigma_scale: 0.02 };
        let n_stages = 2;
        let lambda = 0.1;
        let vals = bin_centered_values(h * w, cfg.bins);

        let mut tape = Tape::new();
        let io = tape.constant(vals.clone(), vec![h, w, 1]);
        let gt = tape.constant(vals.clone(), vec![h, w, 1]);
        let stages: Vec<StageTriple> = (0..n_stages)
            .map(|_| {
                let s: Vec<Var> = (0..3)
                    .map(|_| tape.constant(vals.clone(), vec![h, w, 1]))
                    .collect();
                StageTriple {
                    s: [s[0], s[1], s[2]],
                    net: zero_mask_net(&mut tape),
                }
            })
            .collect();
        let out = hdr_loss(&mut tape, io, gt, &stages, lambda, &cfg, 5000.0).unwrap();
        // Identical streams: every MaskMI is 1, so mi = 2 * stages.
        assert!((tape.value(out.mi)[0] - 2.0 * n_stages as f64).abs() <= 1e-9);
        assert!((tape.value(out.total)[0] - lambda * 2.0 * n_stages as f64).abs() <= 1e-9);
        let (u, o) = out.mi_pairs.unwrap();
        assert!((tape.value(u)[0] - n_stages as f64).abs() <= 1e-9);
        assert!((tape.value(o)[0] - n_stages as f64).abs() <= 1e-9);

        // lambda = 0 reduces to the tonemapped L1.
        let io2 = tape.constant(vals.iter().map(|v| v * 0.5).collect(), vec![h, w, 1]);
        let out = hdr_loss(&mut tape, io2, gt, &stages, 0.0, &cfg, 5000.0).unwrap();
        let tm = |x: f64| (1.0 + 5000.0 * x).ln() / 5001.0f64.ln();
        let want: f64 = vals.iter().map(|&v| (tm(0.5 * v) - tm(v)).abs()).sum::<f64>()
            / (h * w) as f64;
        assert!((tape.value(out.total)[0] - want).abs() <= 1e-12);
        assert_eq!(tape.value(out.l1)[0], tape.value(out.total)[0]);
    }

    #[test]
    fn hdr_loss_random_case_matches_composed_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(69);
        let (h, w) = (6, 6);
        let lambda = 0.07;
        let cfg = SoftHistogramConfig::default();
        let io_v: Vec<f64> = (0..h * w).map(|_| rng.gen::<f64>()).collect();
        let gt_v: Vec<f64> = (0..h * w).map(|_| rng.gen::<f64>()).collect();
        let net_data = mask_net_data(&mut rng);
        let s_vals: Vec<Vec<f64>> = (0..3).map(|_| rand_vec(&mut rng, h * w)).collect();

        let mut tape = Tape::new();
        let io = tape.constant(io_v.clone(), vec![h, w, 1]);
        let gt = tape.constant(gt_v.clone(), vec![h, w, 1]);
        let stage = StageTriple {
            s: [
                tape.constant(s_vals[0].clone(), vec![h, w, 1]),
                tape.constant(s_vals[1].clone(), vec![h, w, 1]),
                tape.constant(s_vals[2].clone(), vec![h, w, 1]),
            ],
            net: lease_mask_net(&mut tape, &net_data, false),
        };
        let out = hdr_loss(&mut tape, io, gt, &[stage], lambda, &cfg, 5000.0).unwrap();

        // Oracle: tonemapped L1 plus two independently evaluated MI terms.
        let tm = |x: f64| (1.0 + 5000.0 * x.max(0.0)).ln() / 5001.0f64.ln();
        let l1: f64 = io_v.iter().zip(&gt_v).map(|(a, b)| (tm(*a) - tm(*b)).abs()).sum::<f64>()
            / (h * w) as f64;
        let eval_mi = |a: &Vec<f64>, b: &Vec<f64>| -> f64 {
            let mut t = Tape::new();
            let sa = t.constant(a.clone(), vec![h, w, 1]);
            let sb = t.constant(b.clone(), vec![h, w, 1]);
            let net = lease_mask_net(&mut t, &net_data, false);
            let term = masked_mi_loss(&mut t, sa, sb, &net, &cfg).unwrap();
            t.value(term.loss)[0]
        };
        let want = l1 + lambda * (eval_mi(&s_vals[1], &s_vals[0]) + eval_mi(&s_vals[1], &s_vals[2]));
        assert!((tape.value(out.total)[0] - want).abs() <= 1e-10);
    }
}
