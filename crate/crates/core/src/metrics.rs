//! Image similarity scores used for evaluation and font distances.

use alloc::vec::Vec;

use crate::corpus::GlyphImage;
use crate::error::{Error, Result};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn check(a: &GlyphImage, b: &GlyphImage) -> Result<()> {
    if a.side() != b.side() {
        return Err(Error::ShapeMismatch { expected: a.pixels().len(), found: b.pixels().len() });
    }
    Ok(())
}

/// Sum of squared pixel differences.
pub fn l2_per_glyph(a: &GlyphImage, b: &GlyphImage) -> Result<f64> {
    check(a, b)?;
    Ok(l2_pixels(a.pixels(), b.pixels()))
}

pub fn l2_pixels(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

/// Normalized Gaussian window of the given size.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size)
        .map(|k| {
            let x = k as f64 - c;
            libm::exp(-x * x / (2.0 * sigma * sigma))
        })
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Mean structural similarity over all window positions that fit inside the
/// image (Gaussian 11x11 window, sigma 1.5, dynamic range 1). Images smaller
/// than the window use one window covering the whole image.
pub fn ssim(a: &GlyphImage, b: &GlyphImage) -> Result<f64> {
    check(a, b)?;
    Ok(ssim_pixels(a.pixels(), b.pixels(), a.side()))
}

pub fn ssim_pixels(a: &[f32], b: &[f32], side: usize) -> f64 {
    let w = SSIM_WINDOW.min(side);
    let g = gaussian_window(w, SSIM_SIGMA);
    let (c1, c2) = ((K1 * K1), (K2 * K2));
    let span = side - w + 1;
    let mut total = 0.0;
    for oy in 0..span {
        for ox in 0..span {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for ky in 0..w {
                for kx in 0..w {
                    let wt = g[ky] * g[kx];
                    let idx = (oy + ky) * side + ox + kx;
                    let (x, y) = (a[idx] as f64, b[idx] as f64);
                    ma += wt * x;
                    mb += wt * y;
                    saa += wt * x * x;
                    sbb += wt * y * y;
                    sab += wt * x * y;
                }
            }
            let va = saa - ma * ma;
            let vb = sbb - mb * mb;
            let cov = sab - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
    }
    total / (span * span) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn img(side: usize, f: impl Fn(usize, usize) -> f32) -> GlyphImage {
        let mut p = vec![0.0; side * side];
        for y in 0..side {
            for x in 0..side {
                p[y * side + x] = f(x, y);
            }
        }
        GlyphImage::new(side, p).unwrap()
    }

    #[test]
    fn identical_images_score_one() {
        let a = img(16, |x, y| ((x * 7 + y * 3) % 11) as f32 / 10.0);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(l2_per_glyph(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn l2_counts_squared_error() {
        let a = GlyphImage::filled(4, 0.0);
        let b = GlyphImage::filled(4, 0.5);
        assert!((l2_per_glyph(&a, &b).unwrap() - 4.0).abs() < 1e-12);
        assert!(l2_per_glyph(&a, &GlyphImage::filled(8, 0.0)).is_err());
    }

    #[test]
    fn constant_images_follow_luminance_term() {
        // Zero variance leaves only the luminance factor.
        let a = GlyphImage::filled(16, 0.2);
        let b = GlyphImage::filled(16, 0.6);
        let want = (2.0 * 0.2 * 0.6 + 1e-4) / (0.04 + 0.36 + 1e-4);
        let got = ssim(&a, &b).unwrap();
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }

    #[test]
    fn symmetric_and_bounded() {
        let a = img(16, |x, _| (x % 2) as f32);
        let b = img(16, |_, y| (y % 3) as f32 / 2.0);
        let ab = ssim(&a, &b).unwrap();
        assert!((ab - ssim(&b, &a).unwrap()).abs() < 1e-12);
        assert!((-1.0..=1.0).contains(&ab));
        let inv = img(16, |x, _| 1.0 - (x % 2) as f32);
        assert!(ssim(&a, &inv).unwrap() < 0.0);
    }

    #[test]
    fn window_is_normalized_and_centered() {
        let g = gaussian_window(11, 1.5);
        assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!((g[5] - libm::exp(0.0) / g.iter().map(|v| v / g[5]).sum::<f64>()).abs() < 1e-15);
        assert_eq!(g[0], g[10]);
    }

    #[test]
    fn small_images_use_whole_image_window() {
        let a = img(8, |x, y| ((x + y) % 2) as f32);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }
}
