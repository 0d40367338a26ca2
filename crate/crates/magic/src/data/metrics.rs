//! PSNR and SSIM over unit-range images.

use crate::autodiff::Tensor;
use crate::error::{MagicError, Result};
use crate::real::Real;

/// PSNR cap reported for (near-)identical images.
pub const PSNR_CAP: f64 = 99.0;

/// `10 * log10(1 / MSE)` for unit-range images, capped at 99 dB.
pub fn psnr<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(MagicError::Input(format!(
            "psnr shape mismatch: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut se = 0.0f64;
    for (x, y) in a.data().iter().zip(b.data()) {
        let d = x.to_f64() - y.to_f64();
        se += d * d;
    }
    let mse = se / a.numel() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut g = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in &mut g {
        *v /= sum;
    }
    g
}

/// Mean structural similarity with an 11x11 Gaussian window (sigma 1.5),
/// computed per channel over the valid region and averaged.
pub fn ssim<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(MagicError::Input(format!(
            "ssim shape mismatch: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let [n, c, h, w] = a.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(MagicError::Input(format!(
            "image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    let g = gaussian_window();
    // separable filter: horizontal then vertical, valid region only
    let filt = |img: &dyn Fn(usize, usize) -> f64| -> Vec<Vec<f64>> {
        let mut hpass = vec![vec![0.0; w - SSIM_WINDOW + 1]; h];
        for y in 0..h {
            for x in 0..w - SSIM_WINDOW + 1 {
                let mut acc = 0.0;
                for (k, gv) in g.iter().enumerate() {
                    acc += gv * img(y, x + k);
                }
                hpass[y][x] = acc;
            }
        }
        let mut out = vec![vec![0.0; w - SSIM_WINDOW + 1]; h - SSIM_WINDOW + 1];
        for y in 0..h - SSIM_WINDOW + 1 {
            for x in 0..w - SSIM_WINDOW + 1 {
                let mut acc = 0.0;
                for (k, gv) in g.iter().enumerate() {
                    acc += gv * hpass[y + k][x];
                }
                out[y][x] = acc;
            }
        }
        out
    };

    let mut total = 0.0;
    let mut count = 0usize;
    for nb in 0..n {
        for ch in 0..c {
            let av = |y: usize, x: usize| a.at(nb, ch, y, x).to_f64();
            let bv = |y: usize, x: usize| b.at(nb, ch, y, x).to_f64();
            let mu_a = filt(&av);
            let mu_b = filt(&bv);
            let aa = filt(&|y, x| av(y, x) * av(y, x));
            let bb = filt(&|y, x| bv(y, x) * bv(y, x));
            let ab = filt(&|y, x| av(y, x) * bv(y, x));
            for y in 0..mu_a.len() {
                for x in 0..mu_a[0].len() {
                    let (ma, mb) = (mu_a[y][x], mu_b[y][x]);
                    let va = aa[y][x] - ma * ma;
                    let vb = bb[y][x] - mb * mb;
                    let cov = ab[y][x] - ma * mb;
                    let s = ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                        / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
                    total += s;
                    count += 1;
                }
            }
        }
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_image(c: usize, h: usize, w: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..c * h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
        Tensor::from_chw(c, h, w, &data).unwrap()
    }

    #[test]
    fn identical_images_hit_the_cap() {
        let a = rand_image(3, 16, 16, 1);
        assert_eq!(psnr(&a, &a).unwrap(), 99.0);
        let b = rand_image(1, 32, 32, 2);
        assert_eq!(ssim(&b, &b).unwrap(), 1.0);
    }

    #[test]
    fn constant_offset_psnr_formula() {
        // 0.5 vs 0.75: MSE = 0.0625 -> 10*log10(16) = 12.0412 dB
        let a = Tensor::<f64>::filled([1, 1, 8, 8], 0.5);
        let b = Tensor::<f64>::filled([1, 1, 8, 8], 0.75);
        let db = psnr(&a, &b).unwrap();
        assert!((db - 12.0412).abs() < 1e-3, "{db}");
    }

    #[test]
    fn psnr_is_symmetric() {
        let a = rand_image(3, 12, 12, 3);
        let b = rand_image(3, 12, 12, 4);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
    }

    #[test]
    fn psnr_shape_mismatch() {
        let a = Tensor::<f64>::zeros([1, 1, 4, 4]);
        let b = Tensor::<f64>::zeros([1, 1, 4, 5]);
        assert!(matches!(psnr(&a, &b), Err(MagicError::Input(_))));
    }

    #[test]
    fn ssim_of_negative_is_below_one() {
        let a = rand_image(1, 24, 24, 5);
        let mut b = a.clone();
        for v in b.data_mut() {
            *v = 1.0 - *v;
        }
        assert!(ssim(&a, &b).unwrap() < 1.0);
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = Tensor::<f64>::zeros([1, 1, 8, 8]);
        assert!(matches!(ssim(&a, &a), Err(MagicError::Input(_))));
    }

    /// Independent per-pixel SSIM: direct weighted statistics at every
    /// valid window position, no separable filtering.
    fn ssim_oracle(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        let [n, c, h, w] = a.shape();
        let g = gaussian_window();
        let mut total = 0.0;
        let mut count = 0;
        for nb in 0..n {
            for ch in 0..c {
                for y0 in 0..h - SSIM_WINDOW + 1 {
                    for x0 in 0..w - SSIM_WINDOW + 1 {
                        let (mut ma, mut mb, mut saa, mut sbb, mut sab) =
                            (0.0, 0.0, 0.0, 0.0, 0.0);
                        for dy in 0..SSIM_WINDOW {
                            for dx in 0..SSIM_WINDOW {
                                let wgt = g[dy] * g[dx];
                                let av = a.at(nb, ch, y0 + dy, x0 + dx);
                                let bv = b.at(nb, ch, y0 + dy, x0 + dx);
                                ma += wgt * av;
                                mb += wgt * bv;
                                saa += wgt * av * av;
                                sbb += wgt * bv * bv;
                                sab += wgt * av * bv;
                            }
                        }
                        let va = saa - ma * ma;
                        let vb = sbb - mb * mb;
                        let cov = sab - ma * mb;
                        total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                            / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
                        count += 1;
                    }
                }
            }
        }
        total / count as f64
    }

    #[test]
    fn ssim_matches_independent_implementation() {
        let a = rand_image(3, 32, 32, 6);
        let b = rand_image(3, 32, 32, 7);
        let got = ssim(&a, &b).unwrap();
        let want = ssim_oracle(&a, &b);
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }
}
