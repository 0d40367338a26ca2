//! Training-pair generation and image quality metrics.
//!
//! The distortion pipeline emulates an imperfect RCCC-style sensor in the
//! linear domain: an approximate color conversion replaces green and blue
//! by luma, a random Gaussian blur stands in for the point spread
//! function, and signal-correlated Gaussian noise is added per channel at
//! one of two scales.

mod image_io;
mod metrics;

pub use image_io::{load_image, save_image};
pub use metrics::{psnr, ssim, PSNR_CAP};

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::Tensor;
use crate::error::{MagicError, Result};
use crate::util::{atomic_write, derive_seed};

/// BT.601 luma weights for the approximate color conversion.
pub const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistortionConfig {
    /// Uniform range for the Gaussian blur sigma, in pixels.
    pub blur_sigma: (f64, f64),
    /// Two noise scales; each pixel's variance is `a + b * intensity`.
    pub noise_scales: [(f64, f64); 2],
}

impl Default for DistortionConfig {
    fn default() -> Self {
        DistortionConfig {
            blur_sigma: (0.5, 2.0),
            noise_scales: [(1e-4, 1e-3), (4e-4, 4e-3)],
        }
    }
}

impl DistortionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blur_sigma.0 <= 0.0 || self.blur_sigma.1 < self.blur_sigma.0 {
            return Err(MagicError::Config(format!(
                "blur sigma range must be positive and ordered, got {:?}",
                self.blur_sigma
            )));
        }
        for (a, b) in self.noise_scales {
            if a < 0.0 || b < 0.0 {
                return Err(MagicError::Config(format!(
                    "noise scale coefficients must be non-negative, got ({a}, {b})"
                )));
            }
        }
        Ok(())
    }
}

/// One training example: the distorted RCC input, the clean RGB target,
/// and the seed that produced the distortion.
#[derive(Clone, Debug)]
pub struct DatasetPair {
    pub input: Tensor<f32>,
    pub target: Tensor<f32>,
    pub seed: u64,
}

/// Replace green and blue by luma: (R, G, B) -> (R, Y, Y).
pub fn rgb_to_rcc(image: &Tensor<f32>) -> Result<Tensor<f32>> {
    let [n, c, h, w] = image.shape();
    if c != 3 {
        return Err(MagicError::Input(format!("rgb_to_rcc expects 3 channels, got {c}")));
    }
    let mut out = Tensor::zeros([n, 3, h, w]);
    for nb in 0..n {
        for y in 0..h {
            for x in 0..w {
                let r = image.at(nb, 0, y, x);
                let g = image.at(nb, 1, y, x);
                let b = image.at(nb, 2, y, x);
                let luma = LUMA[0] * r + LUMA[1] * g + LUMA[2] * b;
                out.set(nb, 0, y, x, r);
                out.set(nb, 1, y, x, luma);
                out.set(nb, 2, y, x, luma);
            }
        }
    }
    Ok(out)
}

#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let mut m = i % period;
    if m < 0 {
        m += period;
    }
    if m < n as isize {
        m as usize
    } else {
        (period - 1 - m) as usize
    }
}

/// Truncated, renormalized Gaussian kernel (support `|d| <= 4 sigma`).
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma).floor() as usize;
    let mut k = Vec::with_capacity(2 * radius + 1);
    let mut sum = 0.0;
    for i in 0..=2 * radius {
        let d = i as f64 - radius as f64;
        let v = (-d * d / (2.0 * sigma * sigma)).exp();
        k.push(v);
        sum += v;
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Separable Gaussian blur with reflected boundaries.
pub fn gaussian_blur(image: &Tensor<f32>, sigma: f64) -> Tensor<f32> {
    let kernel = gaussian_kernel(sigma);
    let radius = kernel.len() / 2;
    if radius == 0 {
        return image.clone();
    }
    let [n, c, h, w] = image.shape();
    let mut hpass = Tensor::zeros([n, c, h, w]);
    for nb in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0f64;
                    for (k, kv) in kernel.iter().enumerate() {
                        let xs = reflect(x as isize + k as isize - radius as isize, w);
                        acc += kv * image.at(nb, ch, y, xs) as f64;
                    }
                    hpass.set(nb, ch, y, x, acc as f32);
                }
            }
        }
    }
    let mut out = Tensor::zeros([n, c, h, w]);
    for nb in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0f64;
                    for (k, kv) in kernel.iter().enumerate() {
                        let ys = reflect(y as isize + k as isize - radius as isize, h);
                        acc += kv * hpass.at(nb, ch, ys, x) as f64;
                    }
                    out.set(nb, ch, y, x, acc as f32);
                }
            }
        }
    }
    out
}

/// Produce a `(distorted RCC, clean RGB)` pair, fully deterministic in
/// `seed`: color conversion, then a random Gaussian blur, then per-channel
/// Gaussian noise with variance `a + b * intensity` at one of the two
/// configured scales, clamped back to the unit range.
pub fn distort(rgb: &Tensor<f32>, cfg: &DistortionConfig, seed: u64) -> Result<DatasetPair> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigma = rng.gen_range(cfg.blur_sigma.0..=cfg.blur_sigma.1);
    let (a, b) = cfg.noise_scales[rng.gen_range(0..2usize)];

    let rcc = rgb_to_rcc(rgb)?;
    let blurred = gaussian_blur(&rcc, sigma);
    let mut input = blurred.clone();
    for v in input.data_mut() {
        let intensity = (*v as f64).clamp(0.0, 1.0);
        let std = (a + b * intensity).sqrt();
        let n: f64 = StandardNormal.sample(&mut rng);
        *v = ((*v as f64 + std * n).clamp(0.0, 1.0)) as f32;
    }
    Ok(DatasetPair { input, target: rgb.clone(), seed })
}

/// Fixed palette for synthetic content. Colorization must infer green and
/// blue from red, luma, and context; a shared palette gives the context a
/// learnable color prior (as natural image statistics do), where uniformly
/// random colors would leave an irreducible ambiguity.
pub const PALETTE: [[f32; 3]; 12] = [
    [0.85, 0.15, 0.10], // red
    [0.90, 0.55, 0.10], // orange
    [0.90, 0.85, 0.20], // yellow
    [0.30, 0.70, 0.20], // green
    [0.10, 0.45, 0.25], // dark green
    [0.15, 0.60, 0.75], // cyan
    [0.15, 0.30, 0.80], // blue
    [0.35, 0.20, 0.65], // violet
    [0.80, 0.30, 0.55], // magenta
    [0.55, 0.40, 0.25], // brown
    [0.85, 0.85, 0.80], // off-white
    [0.20, 0.20, 0.25], // near-black
];

/// Procedural RGB test image: a color gradient, a sinusoidal texture, and
/// a handful of colored rectangles and disks, all drawn from [`PALETTE`].
pub fn synthetic_rgb(width: usize, height: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c0 = PALETTE[rng.gen_range(0..PALETTE.len())];
    let c1 = PALETTE[rng.gen_range(0..PALETTE.len())];
    let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
    let (dx, dy) = (theta.cos(), theta.sin());
    let amp: f64 = rng.gen_range(0.02..0.08);
    let freq: f64 = rng.gen_range(0.2..0.9);
    let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let tex_theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);

    let mut img = Tensor::zeros([1, 3, height, width]);
    let diag = ((width * width + height * height) as f64).sqrt();
    for y in 0..height {
        for x in 0..width {
            let t = ((x as f64 * dx + y as f64 * dy) / diag + 0.5).clamp(0.0, 1.0) as f32;
            let u = x as f64 * tex_theta.cos() + y as f64 * tex_theta.sin();
            let tex = (amp * (freq * u + phase).sin()) as f32;
            for c in 0..3 {
                let v = c0[c] * (1.0 - t) + c1[c] * t + tex;
                img.set(0, c, y, x, v.clamp(0.0, 1.0));
            }
        }
    }
    let shapes = rng.gen_range(3..7usize);
    for _ in 0..shapes {
        let color = PALETTE[rng.gen_range(0..PALETTE.len())];
        let cx = rng.gen_range(0..width) as isize;
        let cy = rng.gen_range(0..height) as isize;
        let r = rng.gen_range(width.min(height) / 12..width.min(height) / 3) as isize;
        let disk: bool = rng.gen();
        for y in (cy - r).max(0)..(cy + r).min(height as isize) {
            for x in (cx - r).max(0)..(cx + r).min(width as isize) {
                let inside = if disk {
                    (x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r
                } else {
                    true
                };
                if inside {
                    for c in 0..3 {
                        img.set(0, c, y as usize, x as usize, color[c]);
                    }
                }
            }
        }
    }
    img
}

/// Generate `count` synthetic pairs. Image content and distortion derive
/// their seeds from `(global seed, index)`, so generation order (or
/// parallelism) cannot change results.
pub fn make_synthetic_dataset(
    count: usize,
    width: usize,
    height: usize,
    cfg: &DistortionConfig,
    seed: u64,
) -> Result<Vec<DatasetPair>> {
    (0..count)
        .map(|i| {
            let img = synthetic_rgb(width, height, derive_seed(seed, 2 * i as u64));
            distort(&img, cfg, derive_seed(seed, 2 * i as u64 + 1))
        })
        .collect()
}

/// Distort a set of reference RGB images into dataset pairs.
pub fn distort_images(
    images: &[Tensor<f32>],
    cfg: &DistortionConfig,
    seed: u64,
) -> Result<Vec<DatasetPair>> {
    images
        .iter()
        .enumerate()
        .map(|(i, img)| distort(img, cfg, derive_seed(seed, 2 * i as u64 + 1)))
        .collect()
}

/// Seed-stable disjoint train/test split of `0..n`.
pub fn split_indices(n: usize, test_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xfeed));
    let mut idx: Vec<usize> = (0..n).collect();
    // Fisher-Yates
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    let n_test = ((n as f64 * test_fraction).round() as usize).clamp(1.min(n), n);
    let test = idx[..n_test].to_vec();
    let train = idx[n_test..].to_vec();
    (train, test)
}

const MANIFEST_NAME: &str = "manifest.txt";

/// Write `input/`, `target/` image directories plus a manifest recording
/// the global seed, per-image seeds, and the distortion config.
pub fn write_dataset(
    dir: &Path,
    pairs: &[DatasetPair],
    cfg: &DistortionConfig,
    global_seed: u64,
) -> Result<()> {
    let mut manifest = String::new();
    manifest.push_str("MAGIC-DATASET v1\n");
    manifest.push_str(&format!("seed: {global_seed}\n"));
    manifest.push_str(&format!("count: {}\n", pairs.len()));
    manifest.push_str(&format!(
        "blur-sigma: {} {}\n",
        cfg.blur_sigma.0, cfg.blur_sigma.1
    ));
    for (i, (na, nb)) in cfg.noise_scales.iter().enumerate() {
        manifest.push_str(&format!("noise-scale-{i}: {na} {nb}\n"));
    }
    for (i, p) in pairs.iter().enumerate() {
        manifest.push_str(&format!("image {i} seed {}\n", p.seed));
        save_image(&dir.join(format!("input/{i:05}.png")), &p.input)?;
        save_image(&dir.join(format!("target/{i:05}.png")), &p.target)?;
    }
    atomic_write(&dir.join(MANIFEST_NAME), manifest.as_bytes())
}

/// Load a dataset directory written by [`write_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Vec<DatasetPair>> {
    let manifest = std::fs::read_to_string(dir.join(MANIFEST_NAME)).map_err(|e| {
        MagicError::Input(format!("missing dataset manifest in {}: {e}", dir.display()))
    })?;
    let mut lines = manifest.lines();
    match lines.next() {
        Some("MAGIC-DATASET v1") => {}
        other => {
            return Err(MagicError::Input(format!(
                "unrecognized dataset manifest header: {other:?}"
            )))
        }
    }
    let mut count = None;
    let mut seeds = Vec::new();
    for line in lines {
        if let Some(rest) = line.strip_prefix("count: ") {
            count = rest.parse::<usize>().ok();
        } else if let Some(rest) = line.strip_prefix("image ") {
            let mut parts = rest.split_whitespace();
            let _idx = parts.next();
            let _kw = parts.next();
            if let Some(s) = parts.next().and_then(|s| s.parse::<u64>().ok()) {
                seeds.push(s);
            }
        }
    }
    let count =
        count.ok_or_else(|| MagicError::Input("dataset manifest missing count".into()))?;
    let mut pairs = Vec::with_capacity(count);
    for i in 0..count {
        pairs.push(DatasetPair {
            input: load_image(&dir.join(format!("input/{i:05}.png")), false)?,
            target: load_image(&dir.join(format!("target/{i:05}.png")), false)?,
            seed: seeds.get(i).copied().unwrap_or(0),
        });
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn luma_of_gray_is_gray() {
        let g = 0.37f32;
        let img = Tensor::<f32>::filled([1, 3, 4, 4], g);
        let rcc = rgb_to_rcc(&img).unwrap();
        for c in 0..3 {
            let v = rcc.at(0, c, 2, 2);
            assert!((v - g).abs() < 1e-6, "channel {c}: {v}");
        }
    }

    #[test]
    fn pure_red_and_green_luma() {
        let mut img = Tensor::<f32>::zeros([1, 3, 1, 1]);
        img.set(0, 0, 0, 0, 1.0);
        let rcc = rgb_to_rcc(&img).unwrap();
        assert!((rcc.at(0, 0, 0, 0) - 1.0).abs() < 1e-7);
        assert!((rcc.at(0, 1, 0, 0) - 0.299).abs() < 1e-7);
        assert!((rcc.at(0, 2, 0, 0) - 0.299).abs() < 1e-7);

        let mut img = Tensor::<f32>::zeros([1, 3, 1, 1]);
        img.set(0, 1, 0, 0, 1.0);
        let rcc = rgb_to_rcc(&img).unwrap();
        assert_eq!(rcc.at(0, 0, 0, 0), 0.0);
        assert!((rcc.at(0, 1, 0, 0) - 0.587).abs() < 1e-7);
        assert!((rcc.at(0, 2, 0, 0) - 0.587).abs() < 1e-7);
    }

    #[test]
    fn rgb_to_rcc_rejects_wrong_channel_count() {
        let img = Tensor::<f32>::zeros([1, 4, 2, 2]);
        assert!(matches!(rgb_to_rcc(&img), Err(MagicError::Input(_))));
    }

    #[test]
    fn blur_kernel_is_normalized() {
        for sigma in [0.5, 0.77, 1.3, 2.0, 3.5] {
            let k = gaussian_kernel(sigma);
            let sum: f64 = k.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "sigma {sigma}: sum {sum}");
        }
    }

    #[test]
    fn no_distortion_limit_reduces_to_color_conversion() {
        let cfg = DistortionConfig {
            blur_sigma: (1e-9, 1e-9), // radius floor(4 sigma) = 0: identity
            noise_scales: [(0.0, 0.0), (0.0, 0.0)],
        };
        let img = synthetic_rgb(24, 16, 3);
        let pair = distort(&img, &cfg, 7).unwrap();
        let rcc = rgb_to_rcc(&img).unwrap();
        assert_eq!(pair.input.data(), rcc.data());
        assert_eq!(pair.target.data(), img.data());
    }

    #[test]
    fn distortion_is_deterministic_per_seed() {
        let img = synthetic_rgb(32, 32, 5);
        let cfg = DistortionConfig::default();
        let a = distort(&img, &cfg, 99).unwrap();
        let b = distort(&img, &cfg, 99).unwrap();
        assert_eq!(a.input.data(), b.input.data());
        let c = distort(&img, &cfg, 100).unwrap();
        assert_ne!(a.input.data(), c.input.data());
    }

    #[test]
    fn noise_variance_tracks_intensity() {
        // flat image at I = 0.5; the sample variance of the noisy output
        // should approximate a + b * 0.5 within 10%
        let intensity = 0.5f32;
        let img = Tensor::<f32>::filled([1, 3, 200, 200], intensity);
        let cfg = DistortionConfig {
            blur_sigma: (1e-9, 1e-9),
            noise_scales: [(1e-4, 1e-3), (1e-4, 1e-3)],
        };
        let pair = distort(&img, &cfg, 11).unwrap();
        let n = pair.input.numel() as f64;
        let mean: f64 = pair.input.data().iter().map(|v| *v as f64).sum::<f64>() / n;
        let var: f64 = pair
            .input
            .data()
            .iter()
            .map(|v| (*v as f64 - mean).powi(2))
            .sum::<f64>()
            / n;
        let want = 1e-4 + 1e-3 * intensity as f64;
        assert!(
            (var - want).abs() / want < 0.1,
            "sample variance {var:.3e} vs expected {want:.3e}"
        );
    }

    #[test]
    fn distorted_values_stay_in_unit_range() {
        let img = synthetic_rgb(48, 48, 8);
        let pair = distort(&img, &DistortionConfig::default(), 13).unwrap();
        assert!(pair.input.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn split_is_seed_stable_and_disjoint() {
        let (tr1, te1) = split_indices(40, 0.25, 7);
        let (tr2, te2) = split_indices(40, 0.25, 7);
        assert_eq!(tr1, tr2);
        assert_eq!(te1, te2);
        assert_eq!(te1.len(), 10);
        let mut all: Vec<usize> = tr1.iter().chain(te1.iter()).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..40).collect::<Vec<_>>());
        let (tr3, _) = split_indices(40, 0.25, 8);
        assert_ne!(tr1, tr3);
    }

    #[test]
    fn dataset_round_trip_and_determinism() {
        use tempfile::tempdir;
        let cfg = DistortionConfig::default();
        let pairs = make_synthetic_dataset(3, 32, 32, &cfg, 42).unwrap();
        let again = make_synthetic_dataset(3, 32, 32, &cfg, 42).unwrap();
        for (a, b) in pairs.iter().zip(&again) {
            assert_eq!(a.input.data(), b.input.data());
            assert_eq!(a.target.data(), b.target.data());
        }
        let dir = tempdir().unwrap();
        write_dataset(dir.path(), &pairs, &cfg, 42).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.len(), 3);
        // 8-bit quantization bounds the reload error
        for (a, b) in pairs.iter().zip(&loaded) {
            assert!(a.input.max_abs_diff(&b.input) <= 0.5 / 255.0 + 1e-6);
            assert_eq!(a.seed, b.seed);
        }
    }
}
