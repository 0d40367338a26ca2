//! PNG/PPM image IO. Files decode to unit-range tensors; by default sample
//! values map linearly (no transfer function), with an optional sRGB
//! decode for sources that need linearization.

use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{MagicError, Result};

fn srgb_to_linear(v: f64) -> f64 {
    if v <= 0.04045 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

pub fn load_image(path: &Path, srgb_decode: bool) -> Result<Tensor<f32>> {
    let img = image::open(path)
        .map_err(|e| MagicError::Input(format!("cannot read {}: {e}", path.display())))?;
    let rgb = img.into_rgb16();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut t = Tensor::zeros([1, 3, h, w]);
    for (y, row) in rgb.rows().enumerate() {
        for (x, px) in row.enumerate() {
            for c in 0..3 {
                let mut v = px.0[c] as f64 / 65535.0;
                if srgb_decode {
                    v = srgb_to_linear(v);
                }
                t.set(0, c, y, x, v as f32);
            }
        }
    }
    Ok(t)
}

/// Save the first three channels as an 8-bit image; format follows the
/// extension (.png, .ppm, .pnm). Writes a temp sibling then renames.
pub fn save_image(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let [_, c, h, w] = t.shape();
    if c < 3 {
        return Err(MagicError::Input(format!("save_image needs >= 3 channels, got {c}")));
    }
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [
                (t.at(0, 0, y, x).clamp(0.0, 1.0) * 255.0).round() as u8,
                (t.at(0, 1, y, x).clamp(0.0, 1.0) * 255.0).round() as u8,
                (t.at(0, 2, y, x).clamp(0.0, 1.0) * 255.0).round() as u8,
            ];
            buf.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir)?;
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("png");
    let tmp = dir.join(format!(
        ".{}.tmp-{}.{ext}",
        path.file_stem().map(|n| n.to_string_lossy()).unwrap_or_default(),
        std::process::id()
    ));
    buf.save(&tmp)
        .map_err(|e| MagicError::Io(std::io::Error::other(format!("saving {}: {e}", path.display()))))?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn png_round_trip_8bit() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("x.png");
        let mut t = Tensor::<f32>::zeros([1, 3, 4, 5]);
        for y in 0..4 {
            for x in 0..5 {
                for c in 0..3 {
                    t.set(0, c, y, x, ((y * 5 + x + c * 7) % 256) as f32 / 255.0);
                }
            }
        }
        save_image(&path, &t).unwrap();
        let back = load_image(&path, false).unwrap();
        assert_eq!(back.shape(), [1, 3, 4, 5]);
        let diff = t.max_abs_diff(&back);
        assert!(diff < 1e-6, "8-bit grid values survive exactly, diff {diff}");
    }

    #[test]
    fn ppm_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("x.ppm");
        let t = Tensor::<f32>::filled([1, 3, 6, 6], 0.25);
        save_image(&path, &t).unwrap();
        let back = load_image(&path, false).unwrap();
        assert!(t.max_abs_diff(&back) < 0.003);
    }

    #[test]
    fn missing_file_is_input_error() {
        assert!(matches!(
            load_image(Path::new("/nonexistent/x.png"), false),
            Err(MagicError::Input(_))
        ));
    }
}
