//! Deterministic synthetic fusion datasets.
//!
//! Scenes are layered textured primitives with a depth assignment; each
//! task degrades them into complementary inputs (defocus halves, exposure
//! brackets, shifted LDR triplets, low-resolution depth) whose union
//! carries more information than any single input.

pub mod raster;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MgdnError, Result};
use crate::model::Task;
use crate::tensor::Tensor;

/// Recipe for one synthetic scene; equal specs render byte-equal scenes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SceneSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    /// Number of textured primitives (at least two are always drawn, one
    /// near and one far).
    pub primitives: usize,
}

/// Rendered scene: linear RGB in [0, 1] plus a depth map (1 = near).
pub struct Scene {
    pub rgb: Tensor,
    pub depth: Tensor,
}

/// One training/evaluation record.
#[derive(Debug, Clone)]
pub struct FusionSample {
    pub inputs: Vec<Tensor>,
    pub gt: Tensor,
    pub task: Task,
    pub meta: BTreeMap<String, String>,
}

/// Renders the scene for a spec: a soft background gradient plus textured
/// rectangles and ellipses painted far-to-near.
pub fn render_scene(spec: &SceneSpec) -> Scene {
    let (h, w) = (spec.height, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut rgb = Tensor::zeros(vec![h, w, 3]);
    let mut depth = Tensor::zeros(vec![h, w, 1]);

    // Background: bilinear blend of two colors with a slow sinusoid.
    let c0: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
    let c1: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
    let phase: f64 = rng.gen::<f64>() * std::f64::consts::TAU;
    for y in 0..h {
        for x in 0..w {
            let u = x as f64 / (w - 1).max(1) as f64;
            let v = y as f64 / (h - 1).max(1) as f64;
            let s = 0.08 * ((u * 2.0 + v) * std::f64::consts::PI + phase).sin();
            for ch in 0..3 {
                let val = c0[ch] * (1.0 - u) + c1[ch] * u + s;
                rgb.data_mut()[(y * w + x) * 3 + ch] = val.clamp(0.02, 0.98);
            }
            depth.data_mut()[y * w + x] = 0.0;
        }
    }

    struct Prim {
        ellipse: bool,
        cy: f64,
        cx: f64,
        ry: f64,
        rx: f64,
        color: [f64; 3],
        amp: f64,
        freq: f64,
        theta: f64,
        phase: f64,
        depth: f64,
    }
    let count = spec.primitives.max(2);
    let mut prims: Vec<Prim> = (0..count)
        .map(|i| {
            let depth_val = match i {
                0 => 0.65 + 0.3 * rng.gen::<f64>(),
                1 => 0.05 + 0.3 * rng.gen::<f64>(),
                _ => rng.gen::<f64>(),
            };
            Prim {
                ellipse: rng.gen::<f64>() < 0.5,
                cy: 0.15 + 0.7 * rng.gen::<f64>(),
                cx: 0.15 + 0.7 * rng.gen::<f64>(),
                ry: 0.10 + 0.22 * rng.gen::<f64>(),
                rx: 0.10 + 0.22 * rng.gen::<f64>(),
                color: [
                    0.05 + 0.9 * rng.gen::<f64>(),
                    0.05 + 0.9 * rng.gen::<f64>(),
                    0.05 + 0.9 * rng.gen::<f64>(),
                ],
                amp: 0.05 + 0.2 * rng.gen::<f64>(),
                freq: 2.0 + 8.0 * rng.gen::<f64>(),
                theta: rng.gen::<f64>() * std::f64::consts::PI,
                phase: rng.gen::<f64>() * std::f64::consts::TAU,
                depth: depth_val,
            }
        })
        .collect();
    // Painter's order: far first so near primitives overwrite.
    prims.sort_by(|a, b| a.depth.partial_cmp(&b.depth).unwrap());

    for p in &prims {
        for y in 0..h {
            for x in 0..w {
                let u = x as f64 / (w - 1).max(1) as f64;
                let v = y as f64 / (h - 1).max(1) as f64;
                let du = (u - p.cx) / p.rx;
                let dv = (v - p.cy) / p.ry;
                let inside = if p.ellipse {
                    du * du + dv * dv <= 1.0
                } else {
                    du.abs() <= 1.0 && dv.abs() <= 1.0
                };
                if !inside {
                    continue;
                }
                let proj = u * p.theta.cos() + v * p.theta.sin();
                let tex = p.amp * (std::f64::consts::TAU * p.freq * proj + p.phase).sin();
                for ch in 0..3 {
                    rgb.data_mut()[(y * w + x) * 3 + ch] = (p.color[ch] + tex).clamp(0.02, 0.98);
                }
                depth.data_mut()[y * w + x] = p.depth;
            }
        }
    }
    Scene { rgb, depth }
}

/// Separable Gaussian blur with clamp-to-edge borders; sigma 0 is the
/// identity.
pub fn gaussian_blur(t: &Tensor, sigma: f64) -> Tensor {
    let radius = (3.0 * sigma).ceil() as isize;
    if radius == 0 {
        return t.clone();
    }
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    for i in -radius..=radius {
        kernel.push((-(i * i) as f64 / (2.0 * sigma * sigma)).exp());
    }
    let ksum: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|v| *v /= ksum);

    let s = t.shape();
    let (h, w, c) = (s[0], s[1], s[2]);
    let clamp = |v: isize, hi: usize| -> usize { v.clamp(0, hi as isize - 1) as usize };
    let mut mid = vec![0.0; h * w * c];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (ki, kv) in kernel.iter().enumerate() {
                    let xx = clamp(x as isize + ki as isize - radius, w);
                    acc += kv * t.data()[(y * w + xx) * c + ch];
                }
                mid[(y * w + x) * c + ch] = acc;
            }
        }
    }
    let mut out = vec![0.0; h * w * c];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (ki, kv) in kernel.iter().enumerate() {
                    let yy = clamp(y as isize + ki as isize - radius, h);
                    acc += kv * mid[(yy * w + x) * c + ch];
                }
                out[(y * w + x) * c + ch] = acc;
            }
        }
    }
    Tensor::from_vec(s.to_vec(), out).expect("same size")
}

/// Integer translation with edge replication.
pub fn translate(t: &Tensor, dy: isize, dx: isize) -> Tensor {
    let s = t.shape();
    let (h, w, c) = (s[0], s[1], s[2]);
    Tensor::from_fn(s.to_vec(), |i| {
        let ch = i % c;
        let p = i / c;
        let (y, x) = (p / w, p % w);
        let sy = (y as isize - dy).clamp(0, h as isize - 1) as usize;
        let sx = (x as isize - dx).clamp(0, w as isize - 1) as usize;
        t.data()[(sy * w + sx) * c + ch]
    })
}

/// Renders a linear radiance map to a display-referred LDR frame at the
/// given exposure: clip(L * 2^ev) ^ (1/2.2).
pub fn expose_ldr(linear: &Tensor, ev: f64) -> Tensor {
    let gain = 2f64.powf(ev);
    Tensor::from_vec(
        linear.shape().to_vec(),
        linear
            .iter()
            .map(|&v| (v * gain).clamp(0.0, 1.0).powf(1.0 / 2.2))
            .collect(),
    )
    .expect("same size")
}

/// Mu-law tonemapping of a linear raster; negative values clamp to zero
/// with a warning.
pub fn mu_law_tonemap(t: &Tensor, mu: f64) -> Tensor {
    if t.iter().any(|v| *v < 0.0) {
        log::warn!("mu_law_tonemap clamping negative values to 0");
    }
    Tensor::from_vec(
        t.shape().to_vec(),
        t.iter()
            .map(|&v| (1.0 + mu * v.max(0.0)).ln() / (1.0 + mu).ln())
            .collect(),
    )
    .expect("same size")
}

fn pad_to_multiple(t: &Tensor, m: usize) -> Tensor {
    let s = t.shape();
    let (h, w, c) = (s[0], s[1], s[2]);
    let hp = h.div_ceil(m) * m;
    let wp = w.div_ceil(m) * m;
    if hp == h && wp == w {
        return t.clone();
    }
    Tensor::from_fn(vec![hp, wp, c], |i| {
        let ch = i % c;
        let p = i / c;
        let (y, x) = (p / wp, p % wp);
        t.data()[(y.min(h - 1) * w + x.min(w - 1)) * c + ch]
    })
}

/// Block-average downsample by `scale` (input padded by edge replication
/// when not divisible).
pub fn box_downsample(t: &Tensor, scale: usize) -> Tensor {
    let padded = pad_to_multiple(t, scale);
    let s = padded.shape();
    let (h, w, c) = (s[0], s[1], s[2]);
    let (oh, ow) = (h / scale, w / scale);
    Tensor::from_fn(vec![oh, ow, c], |i| {
        let ch = i % c;
        let p = i / c;
        let (y, x) = (p / ow, p % ow);
        let mut acc = 0.0;
        for dy in 0..scale {
            for dx in 0..scale {
                acc += padded.data()[((y * scale + dy) * w + x * scale + dx) * c + ch];
            }
        }
        acc / (scale * scale) as f64
    })
}

fn catmull_rom(t: f64) -> f64 {
    let a = t.abs();
    if a < 1.0 {
        1.5 * a * a * a - 2.5 * a * a + 1.0
    } else if a < 2.0 {
        -0.5 * a * a * a + 2.5 * a * a - 4.0 * a + 2.0
    } else {
        0.0
    }
}

/// Bicubic (Catmull-Rom) resampling to an explicit output size.
pub fn bicubic_resize(t: &Tensor, oh: usize, ow: usize) -> Tensor {
    let s = t.shape();
    let (h, w, c) = (s[0], s[1], s[2]);
    let clamp = |v: isize, hi: usize| -> usize { v.clamp(0, hi as isize - 1) as usize };
    Tensor::from_fn(vec![oh, ow, c], |i| {
        let ch = i % c;
        let p = i / c;
        let (y, x) = (p / ow, p % ow);
        let sy = (y as f64 + 0.5) * h as f64 / oh as f64 - 0.5;
        let sx = (x as f64 + 0.5) * w as f64 / ow as f64 - 0.5;
        let (fy, fx) = (sy.floor(), sx.floor());
        let mut acc = 0.0;
        let mut wsum = 0.0;
        for dy in -1..=2_isize {
            for dx in -1..=2_isize {
                let wy = catmull_rom(sy - (fy + dy as f64));
                let wx = catmull_rom(sx - (fx + dx as f64));
                let yy = clamp(fy as isize + dy, h);
                let xx = clamp(fx as isize + dx, w);
                acc += wy * wx * t.data()[(yy * w + xx) * c + ch];
                wsum += wy * wx;
            }
        }
        acc / wsum
    })
}

/// The near/far split used by the multi-focus generator (true = near).
pub fn multifocus_mask(depth: &Tensor) -> Vec<bool> {
    depth.iter().map(|&d| d > 0.5).collect()
}

/// Multi-focus pair: input A is sharp on near content and defocused on far
/// content, input B the opposite; the ground truth is the all-in-focus
/// scene. `blur_sigma` is the defocus Gaussian sigma in pixels.
pub fn gen_multifocus(spec: &SceneSpec, blur_sigma: f64) -> FusionSample {
    let scene = render_scene(spec);
    let blurred = gaussian_blur(&scene.rgb, blur_sigma);
    let mask = multifocus_mask(&scene.depth);
    let compose = |near_sharp: bool| -> Tensor {
        Tensor::from_fn(scene.rgb.shape().to_vec(), |i| {
            let p = i / 3;
            let near = mask[p];
            if near == near_sharp {
                scene.rgb.data()[i]
            } else {
                blurred.data()[i]
            }
        })
    };
    let mut meta = BTreeMap::new();
    meta.insert("blur_sigma".into(), blur_sigma.to_string());
    FusionSample {
        inputs: vec![compose(true), compose(false)],
        gt: scene.rgb,
        task: Task::Mff,
        meta,
    }
}

/// Exposure bracket: under (-2 EV) and over (+2 EV) renderings as inputs,
/// the mid exposure as ground truth.
pub fn gen_multiexposure(spec: &SceneSpec) -> FusionSample {
    let scene = render_scene(spec);
    let mut meta = BTreeMap::new();
    meta.insert("ev".into(), "-2,2".into());
    FusionSample {
        inputs: vec![expose_ldr(&scene.rgb, -2.0), expose_ldr(&scene.rgb, 2.0)],
        gt: expose_ldr(&scene.rgb, 0.0),
        task: Task::Mef,
        meta,
    }
}

/// Bracketed LDR triplet with simulated motion ghosting: the non-reference
/// frames are translated by up to `motion_px` pixels before rendering. The
/// ground truth is the linear radiance aligned to the middle frame.
pub fn gen_hdr_triplet(spec: &SceneSpec, motion_px: usize, evs: [f64; 3]) -> FusionSample {
    let scene = render_scene(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0xDEAD_BEEF_0451);
    let mut shift = |t: &Tensor| -> Tensor {
        if motion_px == 0 {
            return t.clone();
        }
        let m = motion_px as isize;
        let dy = rng.gen_range(-m..=m);
        let dx = rng.gen_range(-m..=m);
        translate(t, dy, dx)
    };
    let under = expose_ldr(&shift(&scene.rgb), evs[0]);
    let reference = expose_ldr(&scene.rgb, evs[1]);
    let over = expose_ldr(&shift(&scene.rgb), evs[2]);
    let mut meta = BTreeMap::new();
    meta.insert("ev".into(), format!("{},{},{}", evs[0], evs[1], evs[2]));
    meta.insert("motion_px".into(), motion_px.to_string());
    FusionSample {
        inputs: vec![under, reference, over],
        gt: scene.rgb,
        task: Task::Hdr,
        meta,
    }
}

/// Guided depth super-resolution: the inputs are the bicubically
/// re-upsampled low-resolution depth and the sharp RGB guide; the ground
/// truth is the full-resolution depth.
pub fn gen_depth_sr(spec: &SceneSpec, scale: usize) -> FusionSample {
    let scene = render_scene(spec);
    let (h, w) = (spec.height, spec.width);
    let lr = box_downsample(&scene.depth, scale);
    let up = bicubic_resize(&lr, h.div_ceil(scale) * scale, w.div_ceil(scale) * scale);
    // Crop back to the original extent when padding was needed.
    let up = Tensor::from_fn(vec![h, w, 1], |i| {
        let (y, x) = (i / w, i % w);
        up.data()[y * (w.div_ceil(scale) * scale) + x]
    });
    let mut meta = BTreeMap::new();
    meta.insert("scale".into(), scale.to_string());
    FusionSample {
        inputs: vec![up, scene.rgb],
        gt: scene.depth,
        task: Task::Gdsr,
        meta,
    }
}

/// One line of the dataset manifest; paths are relative to the manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub task: String,
    pub inputs: Vec<String>,
    pub gt: String,
    pub meta: BTreeMap<String, String>,
}

pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| MgdnError::io(path, e))?;
    for e in entries {
        let line = serde_json::to_string(e)
            .map_err(|e| MgdnError::Format(format!("manifest encode: {e}")))?;
        writeln!(f, "{line}").map_err(|e| MgdnError::io(path, e))?;
    }
    Ok(())
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| MgdnError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l)
                .map_err(|e| MgdnError::Format(format!("manifest line '{l}': {e}")))
        })
        .collect()
}

/// Reads a manifest entry's rasters back into a sample.
pub fn load_sample(manifest_path: impl AsRef<Path>, entry: &ManifestEntry) -> Result<FusionSample> {
    let dir = manifest_path
        .as_ref()
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    let inputs = entry
        .inputs
        .iter()
        .map(|p| raster::read_raster(dir.join(p)))
        .collect::<Result<Vec<_>>>()?;
    let gt = raster::read_raster(dir.join(&entry.gt))?;
    Ok(FusionSample {
        inputs,
        gt,
        task: Task::parse(&entry.task)?,
        meta: entry.meta.clone(),
    })
}

/// Generates one sample for a task with its default degradation settings.
pub fn gen_for_task(task: Task, spec: &SceneSpec) -> FusionSample {
    match task {
        Task::Mff => gen_multifocus(spec, 2.0),
        Task::Mef => gen_multiexposure(spec),
        Task::Hdr => gen_hdr_triplet(spec, 2, [-2.0, 0.0, 2.0]),
        Task::Gdsr => gen_depth_sr(spec, 4),
    }
}

fn sample_seed(base: u64, index: u64) -> u64 {
    // splitmix64 step keeps per-sample seeds decorrelated.
    let mut z = base.wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Writes `count` samples and their manifest under `out_dir`; returns the
/// manifest path. HDR ground truth and depth maps use the float format,
/// display-referred rasters use PNG.
pub fn generate_dataset(
    task: Task,
    count: usize,
    seed: u64,
    height: usize,
    width: usize,
    out_dir: impl AsRef<Path>,
) -> Result<PathBuf> {
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(|e| MgdnError::io(out_dir, e))?;
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let spec = SceneSpec {
            seed: sample_seed(seed, i as u64),
            height,
            width,
            primitives: 6,
        };
        let sample = gen_for_task(task, &spec);
        let id = format!("{}-{i:05}", task.as_str());
        let float_gt = matches!(task, Task::Hdr | Task::Gdsr);
        let mut input_paths = Vec::new();
        for (k, input) in sample.inputs.iter().enumerate() {
            let ext = if input.shape()[2] == 1 && float_gt { "mgdr" } else { "png" };
            let name = format!("{id}_in{k}.{ext}");
            raster::write_raster(out_dir.join(&name), input)?;
            input_paths.push(name);
        }
        let gt_name = format!("{id}_gt.{}", if float_gt { "mgdr" } else { "png" });
        raster::write_raster(out_dir.join(&gt_name), &sample.gt)?;
        entries.push(ManifestEntry {
            id,
            task: task.as_str().into(),
            inputs: input_paths,
            gt: gt_name,
            meta: sample.meta,
        });
    }
    let manifest = out_dir.join("manifest.jsonl");
    write_manifest(&manifest, &entries)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics;

    fn spec(seed: u64) -> SceneSpec {
        SceneSpec { seed, height: 48, width: 48, primitives: 6 }
    }

    #[test]
    fn scenes_are_deterministic() {
        let a = render_scene(&spec(3));
        let b = render_scene(&spec(3));
        assert_eq!(a.rgb.data(), b.rgb.data());
        assert_eq!(a.depth.data(), b.depth.data());
        let c = render_scene(&spec(4));
        assert!(c.rgb.data() != a.rgb.data());
    }

    #[test]
    fn zero_sigma_blur_is_identity() {
        let s = gen_multifocus(&spec(5), 0.0);
        assert_eq!(s.inputs[0].data(), s.gt.data());
        assert_eq!(s.inputs[1].data(), s.gt.data());
    }

    #[test]
    fn mask_composite_reconstructs_ground_truth() {
        let sp = spec(6);
        let s = gen_multifocus(&sp, 2.0);
        let mask = multifocus_mask(&render_scene(&sp).depth);
        let composite = Tensor::from_fn(s.gt.shape().to_vec(), |i| {
            let p = i / 3;
            if mask[p] {
                s.inputs[0].data()[i]
            } else {
                s.inputs[1].data()[i]
            }
        });
        assert_eq!(composite.data(), s.gt.data());
    }

    #[test]
    fn composite_outperforms_single_inputs_on_twenty_seeds() {
        for seed in 0..20 {
            let sp = spec(100 + seed);
            let s = gen_multifocus(&sp, 2.0);
            let mask = multifocus_mask(&render_scene(&sp).depth);
            let composite = Tensor::from_fn(s.gt.shape().to_vec(), |i| {
                let p = i / 3;
                if mask[p] {
                    s.inputs[0].data()[i]
                } else {
                    s.inputs[1].data()[i]
                }
            });
            let p_comp = metrics::psnr(&composite, &s.gt, 1.0).unwrap();
            for input in &s.inputs {
                let p_in = metrics::psnr(input, &s.gt, 1.0).unwrap();
                assert!(p_in < p_comp, "seed {seed}: input {p_in} vs composite {p_comp}");
            }
        }
    }

    #[test]
    fn no_single_input_attains_ground_truth() {
        for seed in [7, 8, 9] {
            let sp = spec(seed);
            for task in [Task::Mff, Task::Mef, Task::Hdr, Task::Gdsr] {
                let s = gen_for_task(task, &sp);
                let gt_like = s
                    .inputs
                    .iter()
                    .filter(|i| i.shape() == s.gt.shape())
                    .collect::<Vec<_>>();
                assert!(!gt_like.is_empty());
                for input in gt_like {
                    assert!(input.data() != s.gt.data(), "{task:?} input equals GT");
                }
            }
        }
    }

    #[test]
    fn zero_ev_render_equals_ground_truth() {
        let sp = spec(10);
        let scene = render_scene(&sp);
        let s = gen_multiexposure(&sp);
        assert_eq!(expose_ldr(&scene.rgb, 0.0).data(), s.gt.data());
    }

    #[test]
    fn overexposed_input_clips_a_fifth_of_pixels() {
        for seed in 0..5 {
            let s = gen_multiexposure(&spec(200 + seed));
            let over = &s.inputs[1];
            let clipped = over.iter().filter(|&&v| v >= 1.0).count();
            let frac = clipped as f64 / over.numel() as f64;
            assert!(frac >= 0.2, "seed {seed}: clipped fraction {frac}");
        }
    }

    #[test]
    fn exposures_bracket_ground_truth_mean() {
        for seed in 0..5 {
            let s = gen_multiexposure(&spec(300 + seed));
            let mean = |t: &Tensor| t.iter().sum::<f64>() / t.numel() as f64;
            let under = mean(&s.inputs[0]);
            let over = mean(&s.inputs[1]);
            let gt = mean(&s.gt);
            assert!(under < gt && gt < over, "seed {seed}: {under} {gt} {over}");
        }
    }

    #[test]
    fn hdr_zero_motion_zero_gap_gives_identical_frames() {
        let s = gen_hdr_triplet(&spec(11), 0, [0.0, 0.0, 0.0]);
        assert_eq!(s.inputs[0].data(), s.inputs[1].data());
        assert_eq!(s.inputs[1].data(), s.inputs[2].data());
    }

    #[test]
    fn bright_highlights_saturate_only_the_long_exposure() {
        let s = gen_hdr_triplet(&spec(12), 0, [-2.0, 0.0, 2.0]);
        let over = &s.inputs[2];
        let under = &s.inputs[0];
        let saturated = over
            .iter()
            .enumerate()
            .filter(|(_, &v)| v >= 1.0)
            .map(|(i, _)| i)
            .collect::<Vec<_>>();
        assert!(!saturated.is_empty());
        for &i in saturated.iter().take(200) {
            assert!(under.data()[i] < 1.0);
        }
    }

    #[test]
    fn inverse_crf_merge_recovers_the_radiance_map() {
        let s = gen_hdr_triplet(&spec(13), 0, [-2.0, 0.0, 2.0]);
        let evs = [-2.0, 0.0, 2.0];
        let merged = Tensor::from_fn(s.gt.shape().to_vec(), |i| {
            let mut num = 0.0;
            let mut den = 0.0;
            for (frame, ev) in s.inputs.iter().zip(evs) {
                let v = frame.data()[i];
                // Hat weighting suppresses clipped ends.
                let wgt = (1.0 - (2.0 * v - 1.0).abs()).max(1e-4);
                let radiance = v.powf(2.2) / 2f64.powf(ev);
                num += wgt * radiance;
                den += wgt;
            }
            num / den
        });
        let p = metrics::psnr(&merged, &s.gt, 1.0).unwrap();
        assert!(p >= 40.0, "merge oracle PSNR {p}");
    }

    #[test]
    fn depth_sr_cases() {
        // Scale 1 keeps the depth map intact.
        let s1 = gen_depth_sr(&spec(14), 1);
        for (a, b) in s1.inputs[0].iter().zip(s1.gt.iter()) {
            assert!((a - b).abs() <= 1e-9);
        }

        // Coarser scales lose strictly more detail, per seed.
        for seed in 0..20 {
            let sp = spec(400 + seed);
            let e = |scale: usize| {
                let s = gen_depth_sr(&sp, scale);
                metrics::rmse(&s.inputs[0], &s.gt).unwrap()
            };
            let (e4, e8, e16) = (e(4), e(8), e(16));
            assert!(e4 > 0.0, "seed {seed}");
            assert!(e16 > e8 && e8 > e4, "seed {seed}: {e4} {e8} {e16}");
        }
    }

    #[test]
    fn mu_law_values() {
        let t = Tensor::from_vec(vec![1, 1, 3], vec![0.0, 1.0, 0.01]).unwrap();
        let y = mu_law_tonemap(&t, 5000.0);
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] - 1.0).abs() < 1e-15);
        assert!((y.data()[2] - 51.0f64.ln() / 5001.0f64.ln()).abs() < 1e-15);

        // Monotone on random pairs.
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for _ in 0..50 {
            let a: f64 = rng.gen();
            let b: f64 = rng.gen();
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let f = |x: f64| (1.0 + 5000.0 * x).ln() / 5001.0f64.ln();
            assert!(f(lo) <= f(hi));
        }
    }

    #[test]
    fn dataset_generation_is_deterministic() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let m1 = generate_dataset(Task::Mff, 3, 77, 32, 32, d1.path()).unwrap();
        let m2 = generate_dataset(Task::Mff, 3, 77, 32, 32, d2.path()).unwrap();
        assert_eq!(fs::read(&m1).unwrap(), fs::read(&m2).unwrap());
        for entry in read_manifest(&m1).unwrap() {
            for p in entry.inputs.iter().chain(std::iter::once(&entry.gt)) {
                assert_eq!(
                    fs::read(d1.path().join(p)).unwrap(),
                    fs::read(d2.path().join(p)).unwrap(),
                    "{p} differs"
                );
            }
        }
    }

    #[test]
    fn manifest_roundtrips_and_loads() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = generate_dataset(Task::Gdsr, 2, 5, 24, 20, dir.path()).unwrap();
        let entries = read_manifest(&manifest).unwrap();
        assert_eq!(entries.len(), 2);
        let sample = load_sample(&manifest, &entries[0]).unwrap();
        assert_eq!(sample.task, Task::Gdsr);
        assert_eq!(sample.inputs.len(), 2);
        assert_eq!(sample.inputs[0].shape(), &[24, 20, 1]);
        assert_eq!(sample.inputs[1].shape(), &[24, 20, 3]);
        assert_eq!(sample.gt.shape(), &[24, 20, 1]);
        // Depth goes through the float format: exact through f32.
        let direct = gen_depth_sr(
            &SceneSpec { seed: sample_seed(5, 0), height: 24, width: 20, primitives: 6 },
            4,
        );
        for (a, b) in sample.gt.iter().zip(direct.gt.iter()) {
            assert!((a - b).abs() <= 1e-7);
        }
    }
}
