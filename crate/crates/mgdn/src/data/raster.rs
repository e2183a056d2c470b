//! Raster I/O: 8-bit PNG for display-referred images and a small float
//! format for HDR/depth data.
//!
//! The float format ("MGDR") is headered little-endian f32, planar:
//!
//! ```text
//! magic b"MGDR", u32 height, u32 width, u32 channels,
//! then channels planes of height*width f32 values
//! ```

use std::fs;
use std::path::Path;

use crate::error::{MgdnError, Result};
use crate::tensor::Tensor;

pub const RASTER_MAGIC: &[u8; 4] = b"MGDR";

fn is_png(path: &Path) -> bool {
    path.extension().map(|e| e == "png").unwrap_or(false)
}

fn is_mgdr(path: &Path) -> bool {
    path.extension().map(|e| e == "mgdr").unwrap_or(false)
}

/// Writes a `[H, W, C]` tensor; the extension picks the format (`.png` for
/// 1- or 3-channel display data in [0, 1], `.mgdr` for anything float).
pub fn write_raster(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let s = t.shape();
    if s.len() != 3 {
        return Err(MgdnError::shape(
            "write_raster",
            format!("want [H,W,C], got {:?}", s),
        ));
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    if is_png(path) {
        let quant = |v: f64| -> u8 { (v.clamp(0.0, 1.0) * 255.0).round() as u8 };
        match c {
            1 => {
                let img = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
                    image::Luma([quant(t.at3(y as usize, x as usize, 0))])
                });
                img.save(path).map_err(|e| MgdnError::Format(format!("png write: {e}")))
            }
            3 => {
                let img = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
                    image::Rgb([
                        quant(t.at3(y as usize, x as usize, 0)),
                        quant(t.at3(y as usize, x as usize, 1)),
                        quant(t.at3(y as usize, x as usize, 2)),
                    ])
                });
                img.save(path).map_err(|e| MgdnError::Format(format!("png write: {e}")))
            }
            other => Err(MgdnError::shape(
                "write_raster",
                format!("png supports 1 or 3 channels, got {other}"),
            )),
        }
    } else if is_mgdr(path) {
        let mut buf = Vec::with_capacity(16 + h * w * c * 4);
        buf.extend_from_slice(RASTER_MAGIC);
        buf.extend_from_slice(&(h as u32).to_le_bytes());
        buf.extend_from_slice(&(w as u32).to_le_bytes());
        buf.extend_from_slice(&(c as u32).to_le_bytes());
        for ch in 0..c {
            for p in 0..h * w {
                buf.extend_from_slice(&(t.data()[p * c + ch] as f32).to_le_bytes());
            }
        }
        fs::write(path, buf).map_err(|e| MgdnError::io(path, e))
    } else {
        Err(MgdnError::Format(format!(
            "unknown raster extension on {}",
            path.display()
        )))
    }
}

/// Reads a raster back as `[H, W, C]` with values scaled to [0, 1] for PNG
/// (float data comes back verbatim through f32).
pub fn read_raster(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    if is_png(path) {
        let img = image::open(path).map_err(|e| MgdnError::Format(format!("png read: {e}")))?;
        match img {
            image::DynamicImage::ImageLuma8(g) => {
                let (w, h) = g.dimensions();
                Tensor::from_vec(
                    vec![h as usize, w as usize, 1],
                    g.pixels().map(|p| p.0[0] as f64 / 255.0).collect(),
                )
            }
            other => {
                let rgb = other.to_rgb8();
                let (w, h) = rgb.dimensions();
                Tensor::from_vec(
                    vec![h as usize, w as usize, 3],
                    rgb.pixels()
                        .flat_map(|p| p.0.iter().map(|&v| v as f64 / 255.0).collect::<Vec<_>>())
                        .collect(),
                )
            }
        }
    } else if is_mgdr(path) {
        let buf = fs::read(path).map_err(|e| MgdnError::io(path, e))?;
        if buf.len() < 16 {
            return Err(MgdnError::Format(format!(
                "raster header truncated at offset {}",
                buf.len()
            )));
        }
        if &buf[..4] != RASTER_MAGIC {
            return Err(MgdnError::Format("bad raster magic at offset 0".into()));
        }
        let h = u32::from_le_bytes(buf[4..8].try_into().unwrap()) as usize;
        let w = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
        let c = u32::from_le_bytes(buf[12..16].try_into().unwrap()) as usize;
        let want = h * w * c * 4;
        if buf.len() - 16 != want {
            return Err(MgdnError::Format(format!(
                "raster payload is {} bytes, header declares {} (offset 16)",
                buf.len() - 16,
                want
            )));
        }
        let mut data = vec![0.0; h * w * c];
        for ch in 0..c {
            for p in 0..h * w {
                let off = 16 + (ch * h * w + p) * 4;
                let v = f32::from_le_bytes(buf[off..off + 4].try_into().unwrap());
                data[p * c + ch] = v as f64;
            }
        }
        Tensor::from_vec(vec![h, w, c], data)
    } else {
        Err(MgdnError::Format(format!(
            "unknown raster extension on {}",
            path.display()
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn float_roundtrip_is_exact_through_f32() {
        let mut rng = ChaCha8Rng::seed_from_u64(90);
        // Values representable in f32 round-trip bit-exactly.
        let t = Tensor::from_fn(vec![5, 7, 3], |_| rng.gen::<f32>() as f64);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.mgdr");
        write_raster(&p, &t).unwrap();
        let back = read_raster(&p).unwrap();
        assert_eq!(back.shape(), t.shape());
        assert_eq!(back.data(), t.data());
    }

    #[test]
    fn png_roundtrip_within_quantization() {
        let mut rng = ChaCha8Rng::seed_from_u64(91);
        let t = Tensor::from_fn(vec![6, 8, 3], |_| rng.gen::<f64>());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        write_raster(&p, &t).unwrap();
        let back = read_raster(&p).unwrap();
        for (a, b) in t.iter().zip(back.iter()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }

        let gray = Tensor::from_fn(vec![4, 4, 1], |i| i as f64 / 16.0);
        let p = dir.path().join("g.png");
        write_raster(&p, &gray).unwrap();
        let back = read_raster(&p).unwrap();
        assert_eq!(back.shape(), &[4, 4, 1]);
        for (a, b) in gray.iter().zip(back.iter()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn truncated_float_raster_is_rejected() {
        let t = Tensor::from_fn(vec![4, 4, 1], |i| i as f64);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.mgdr");
        write_raster(&p, &t).unwrap();
        let bytes = fs::read(&p).unwrap();
        let cut = dir.path().join("cut.mgdr");
        fs::write(&cut, &bytes[..bytes.len() - 7]).unwrap();
        let err = read_raster(&cut).unwrap_err().to_string();
        assert!(err.contains("declares"), "{err}");

        let bad = dir.path().join("bad.mgdr");
        fs::write(&bad, b"NOPE").unwrap();
        let err = read_raster(&bad).unwrap_err().to_string();
        assert!(err.contains("offset"), "{err}");
    }
}
