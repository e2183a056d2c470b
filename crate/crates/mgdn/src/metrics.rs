//! Evaluation metrics: PSNR (plain, linear, tonemapped), SSIM, hard-binned
//! NMI, histogram entropy and RMSE, plus per-sample/aggregate reporting.

use serde::{Deserialize, Serialize};

use crate::error::{MgdnError, Result};
use crate::tensor::Tensor;

/// Cap reported for identical images instead of infinity.
pub const PSNR_CAP: f64 = 99.0;

fn check_same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(MgdnError::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

pub fn mse(a: &Tensor, b: &Tensor) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.numel() as f64
}

/// `10 log10(peak^2 / MSE)`, capped at 99 dB for identical inputs.
pub fn psnr(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    check_same_shape("psnr", a, b)?;
    let m = mse(a, b);
    if m == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / m).log10()).min(PSNR_CAP))
}

/// Mu-law compression of a linear-domain raster (plain, not on a tape).
pub fn mu_law_tonemap_value(x: f64, mu: f64) -> f64 {
    (1.0 + mu * x.max(0.0)).ln() / (1.0 + mu).ln()
}

/// PSNR in the tonemapped domain: both linear inputs go through the mu-law
/// curve first.
pub fn psnr_mu(a_linear: &Tensor, b_linear: &Tensor, mu: f64) -> Result<f64> {
    check_same_shape("psnr_mu", a_linear, b_linear)?;
    let tm = |t: &Tensor| {
        Tensor::from_vec(
            t.shape().to_vec(),
            t.iter().map(|&v| mu_law_tonemap_value(v, mu)).collect(),
        )
        .expect("same length")
    };
    psnr(&tm(a_linear), &tm(b_linear), 1.0)
}

pub fn rmse(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_same_shape("rmse", a, b)?;
    Ok(mse(a, b).sqrt())
}

fn gaussian_window(n: usize, sigma: f64) -> Vec<f64> {
    let r = (n / 2) as isize;
    let mut w = Vec::with_capacity(n * n);
    for y in -r..=r {
        for x in -r..=r {
            w.push((-((y * y + x * x) as f64) / (2.0 * sigma * sigma)).exp());
        }
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Mean local SSIM with an 11x11 Gaussian window (sigma 1.5), K1 = 0.01,
/// K2 = 0.03, evaluated per channel on valid window positions and averaged.
/// Images smaller than the window fall back to one uniform global window.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_same_shape("ssim", a, b)?;
    let s = a.shape();
    let (h, w, c) = (s[0], s[1], s[2]);
    const WIN: usize = 11;
    let peak = 1.0;
    let c1 = (0.01 * peak) * (0.01 * peak);
    let c2 = (0.03 * peak) * (0.03 * peak);

    let local = |weights: &[f64], coords: &[(usize, usize)], ch: usize| -> f64 {
        let mut mx = 0.0;
        let mut my = 0.0;
        let mut mxx = 0.0;
        let mut myy = 0.0;
        let mut mxy = 0.0;
        for (&(y, x), &wt) in coords.iter().zip(weights) {
            let xv = a.at3(y, x, ch);
            let yv = b.at3(y, x, ch);
            mx += wt * xv;
            my += wt * yv;
            mxx += wt * xv * xv;
            myy += wt * yv * yv;
            mxy += wt * xv * yv;
        }
        let vx = mxx - mx * mx;
        let vy = myy - my * my;
        let cov = mxy - mx * my;
        ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    };

    let mut total = 0.0;
    let mut count = 0usize;
    if h < WIN || w < WIN {
        // Single global window with uniform weights.
        let coords: Vec<(usize, usize)> = (0..h).flat_map(|y| (0..w).map(move |x| (y, x))).collect();
        let weights = vec![1.0 / (h * w) as f64; h * w];
        for ch in 0..c {
            total += local(&weights, &coords, ch);
            count += 1;
        }
    } else {
        let weights = gaussian_window(WIN, 1.5);
        for ch in 0..c {
            for y0 in 0..=h - WIN {
                for x0 in 0..=w - WIN {
                    let coords: Vec<(usize, usize)> = (0..WIN)
                        .flat_map(|dy| (0..WIN).map(move |dx| (y0 + dy, x0 + dx)))
                        .collect();
                    total += local(&weights, &coords, ch);
                    count += 1;
                }
            }
        }
    }
    Ok(total / count as f64)
}

fn hard_histogram(t: &Tensor, bins: usize) -> Option<Vec<usize>> {
    let (lo, hi) = t.min_max();
    if !(hi > lo) {
        return None;
    }
    let mut counts = vec![0usize; bins];
    for &v in t.iter() {
        let idx = (((v - lo) / (hi - lo)) * bins as f64) as usize;
        counts[idx.min(bins - 1)] += 1;
    }
    Some(counts)
}

fn entropy_nats(counts: &[usize], n: usize) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n as f64;
            -p * p.ln()
        })
        .sum()
}

/// Hard-binned normalized mutual information `2 I(A;B) / (H(A) + H(B))`
/// over joint histograms (evaluation only, not differentiable). Constant
/// inputs yield 0 with a warning.
pub fn nmi_metric(a: &Tensor, b: &Tensor, bins: usize) -> Result<f64> {
    check_same_shape("nmi_metric", a, b)?;
    let (lo_a, hi_a) = a.min_max();
    let (lo_b, hi_b) = b.min_max();
    if !(hi_a > lo_a) || !(hi_b > lo_b) {
        log::warn!("nmi_metric on a constant image; returning 0");
        return Ok(0.0);
    }
    let n = a.numel();
    let idx = |v: f64, lo: f64, hi: f64| -> usize {
        ((((v - lo) / (hi - lo)) * bins as f64) as usize).min(bins - 1)
    };
    let mut joint = vec![0usize; bins * bins];
    let mut ha = vec![0usize; bins];
    let mut hb = vec![0usize; bins];
    for (&x, &y) in a.iter().zip(b.iter()) {
        let i = idx(x, lo_a, hi_a);
        let j = idx(y, lo_b, hi_b);
        joint[i * bins + j] += 1;
        ha[i] += 1;
        hb[j] += 1;
    }
    let h_a = entropy_nats(&ha, n);
    let h_b = entropy_nats(&hb, n);
    let h_ab = entropy_nats(&joint, n);
    if h_a + h_b == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * (h_a + h_b - h_ab) / (h_a + h_b))
}

/// Shannon entropy of the hard value histogram, in bits.
pub fn entropy_metric(t: &Tensor, bins: usize) -> f64 {
    match hard_histogram(t, bins) {
        Some(counts) => entropy_nats(&counts, t.numel()) / std::f64::consts::LN_2,
        None => 0.0,
    }
}

/// One evaluated sample.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricRow {
    pub id: String,
    pub psnr: f64,
    pub psnr_mu: f64,
    pub psnr_linear: f64,
    pub ssim: f64,
    pub nmi: f64,
    pub entropy: f64,
    pub rmse: f64,
}

/// Per-sample rows plus arithmetic-mean aggregates.
#[derive(Debug, Clone, Default)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

impl MetricReport {
    pub fn push(&mut self, row: MetricRow) {
        self.rows.push(row);
    }

    /// Arithmetic means across samples (NaN-free: empty reports give 0s).
    pub fn aggregate(&self) -> MetricRow {
        let n = self.rows.len().max(1) as f64;
        let sum = |f: fn(&MetricRow) -> f64| self.rows.iter().map(f).sum::<f64>() / n;
        MetricRow {
            id: "mean".into(),
            psnr: sum(|r| r.psnr),
            psnr_mu: sum(|r| r.psnr_mu),
            psnr_linear: sum(|r| r.psnr_linear),
            ssim: sum(|r| r.ssim),
            nmi: sum(|r| r.nmi),
            entropy: sum(|r| r.entropy),
            rmse: sum(|r| r.rmse),
        }
    }

    /// Line-delimited JSON, one record per sample, aggregate last.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for row in self.rows.iter().chain(std::iter::once(&self.aggregate())) {
            out.push_str(&serde_json::to_string(row).expect("metric rows serialize"));
            out.push('\n');
        }
        out
    }

    /// Aligned text table.
    pub fn to_table(&self) -> String {
        let header = [
            "id", "psnr", "psnr_mu", "psnr_linear", "ssim", "nmi", "entropy", "rmse",
        ];
        let fmt_row = |r: &MetricRow| -> Vec<String> {
            vec![
                r.id.clone(),
                format!("{:.4}", r.psnr),
                format!("{:.4}", r.psnr_mu),
                format!("{:.4}", r.psnr_linear),
                format!("{:.6}", r.ssim),
                format!("{:.6}", r.nmi),
                format!("{:.4}", r.entropy),
                format!("{:.6}", r.rmse),
            ]
        };
        let mut rows: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
        for r in &self.rows {
            rows.push(fmt_row(r));
        }
        rows.push(fmt_row(&self.aggregate()));
        let widths: Vec<usize> = (0..header.len())
            .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for r in rows {
            let line: Vec<String> = r
                .iter()
                .zip(&widths)
                .map(|(cell, w)| format!("{cell:>w$}", w = w))
                .collect();
            out.push_str(&line.join("  "));
            out.push('\n');
        }
        out
    }
}
