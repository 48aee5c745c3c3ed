//! Two-dimensional CDF 9/7 wavelet transform (lifting scheme).
//!
//! Coefficients are held in the usual Mallat layout: after each level the
//! top-left quadrant of the running region holds the low-pass band and the
//! remaining three quadrants hold the detail bands. Every lifting step has
//! unit determinant and the final scaling multiplies the low channel by `K`
//! and the high channel by `1/K`, so the transform is volume preserving.
//!
//! The canonical flat order (used to index per-coefficient likelihood
//! parameters) is documented in `docs/wavelet-layout.md`: the coarsest LL
//! band first, then for each level from coarsest to finest the HL, LH and HH
//! bands, each row-major.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

pub const PREDICT_1: f64 = -1.586_134_342_059_924;
pub const UPDATE_1: f64 = -0.052_980_118_572_961;
pub const PREDICT_2: f64 = 0.882_911_075_530_934;
pub const UPDATE_2: f64 = 0.443_506_852_043_971;
pub const SCALE: f64 = 1.149_604_398_860_241_8;

const STEPS: [(f64, Parity); 4] = [
    (PREDICT_1, Parity::Odd),
    (UPDATE_1, Parity::Even),
    (PREDICT_2, Parity::Odd),
    (UPDATE_2, Parity::Even),
];

#[derive(Clone, Copy)]
enum Parity {
    Even,
    Odd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Band {
    LL,
    HL,
    LH,
    HH,
}

/// Largest admissible depth for a square image of the given side.
pub fn max_levels(side: usize) -> usize {
    if side.is_power_of_two() {
        side.trailing_zeros() as usize
    } else {
        0
    }
}

fn check_shape(side: usize, len: usize) -> Result<()> {
    if side < 2 || !side.is_power_of_two() || side * side != len {
        return Err(Error::BadImageShape { side, len });
    }
    Ok(())
}

fn check_levels(side: usize, levels: usize) -> Result<()> {
    let max = max_levels(side);
    if levels == 0 || levels > max {
        return Err(Error::LevelsOutOfRange { levels, max });
    }
    Ok(())
}

#[inline]
fn mirror(i: isize, n: usize) -> usize {
    if i < 0 {
        (-i) as usize
    } else if i as usize >= n {
        2 * (n - 1) - i as usize
    } else {
        i as usize
    }
}

fn neighbours(i: usize, n: usize) -> (usize, usize) {
    (mirror(i as isize - 1, n), mirror(i as isize + 1, n))
}

fn targets(parity: Parity, n: usize) -> core::iter::StepBy<core::ops::Range<usize>> {
    let start = match parity {
        Parity::Even => 0,
        Parity::Odd => 1,
    };
    (start..n).step_by(2)
}

fn lift(x: &mut [f64], coef: f64, parity: Parity) {
    let n = x.len();
    for i in targets(parity, n) {
        let (l, r) = neighbours(i, n);
        x[i] += coef * (x[l] + x[r]);
    }
}

fn lift_transposed(x: &mut [f64], coef: f64, parity: Parity) {
    let n = x.len();
    for i in targets(parity, n) {
        let (l, r) = neighbours(i, n);
        let v = coef * x[i];
        x[l] += v;
        x[r] += v;
    }
}

fn scale(x: &mut [f64], low: f64, high: f64) {
    for (i, v) in x.iter_mut().enumerate() {
        *v *= if i % 2 == 0 { low } else { high };
    }
}

fn deinterleave(x: &mut [f64], scratch: &mut Vec<f64>) {
    let h = x.len() / 2;
    scratch.clear();
    scratch.extend_from_slice(x);
    for i in 0..h {
        x[i] = scratch[2 * i];
        x[h + i] = scratch[2 * i + 1];
    }
}

fn interleave(x: &mut [f64], scratch: &mut Vec<f64>) {
    let h = x.len() / 2;
    scratch.clear();
    scratch.extend_from_slice(x);
    for i in 0..h {
        x[2 * i] = scratch[i];
        x[2 * i + 1] = scratch[h + i];
    }
}

/// One level of the 1-D forward transform; output is `[low | high]`.
pub fn forward_1d(x: &mut [f64], scratch: &mut Vec<f64>) {
    for &(c, p) in &STEPS {
        lift(x, c, p);
    }
    scale(x, SCALE, 1.0 / SCALE);
    deinterleave(x, scratch);
}

pub fn inverse_1d(x: &mut [f64], scratch: &mut Vec<f64>) {
    interleave(x, scratch);
    scale(x, 1.0 / SCALE, SCALE);
    for &(c, p) in STEPS.iter().rev() {
        lift(x, -c, p);
    }
}

/// Transpose of [`forward_1d`].
pub fn forward_1d_transposed(x: &mut [f64], scratch: &mut Vec<f64>) {
    interleave(x, scratch);
    scale(x, SCALE, 1.0 / SCALE);
    for &(c, p) in STEPS.iter().rev() {
        lift_transposed(x, c, p);
    }
}

type Pass1d = fn(&mut [f64], &mut Vec<f64>);

fn rows(data: &mut [f64], side: usize, n: usize, f: Pass1d, scratch: &mut Vec<f64>) {
    for r in 0..n {
        f(&mut data[r * side..r * side + n], scratch);
    }
}

fn cols(data: &mut [f64], side: usize, n: usize, f: Pass1d, scratch: &mut Vec<f64>) {
    let mut col = vec![0.0; n];
    for c in 0..n {
        for r in 0..n {
            col[r] = data[r * side + c];
        }
        f(&mut col, scratch);
        for r in 0..n {
            data[r * side + c] = col[r];
        }
    }
}

/// A full multi-level decomposition of one square image.
#[derive(Clone, Debug, PartialEq)]
pub struct WaveletPyramid {
    side: usize,
    levels: usize,
    /// Mallat layout, row-major, `side * side` entries.
    coeffs: Vec<f64>,
}

impl WaveletPyramid {
    pub fn from_coefficients(side: usize, levels: usize, coeffs: Vec<f64>) -> Result<Self> {
        check_shape(side, coeffs.len())?;
        check_levels(side, levels)?;
        Ok(Self { side, levels, coeffs })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    /// Coefficients in Mallat layout.
    pub fn coefficients(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn into_coefficients(self) -> Vec<f64> {
        self.coeffs
    }

    /// Row-major contents of one band. `level` counts from 1 (finest) and is
    /// ignored for [`Band::LL`], which always returns the final low band.
    pub fn band(&self, band: Band, level: usize) -> Vec<f64> {
        let (r0, c0, h) = band_origin(self.side, self.levels, band, level);
        let mut out = Vec::with_capacity(h * h);
        for r in 0..h {
            out.extend_from_slice(&self.coeffs[(r0 + r) * self.side + c0..][..h]);
        }
        out
    }

    /// Coefficients in canonical flat order.
    pub fn flatten(&self) -> Vec<f64> {
        layout(self.side, self.levels)
            .into_iter()
            .map(|i| self.coeffs[i])
            .collect()
    }

    pub fn unflatten(side: usize, levels: usize, flat: &[f64]) -> Result<Self> {
        check_shape(side, flat.len())?;
        check_levels(side, levels)?;
        let mut coeffs = vec![0.0; flat.len()];
        for (k, i) in layout(side, levels).into_iter().enumerate() {
            coeffs[i] = flat[k];
        }
        Ok(Self { side, levels, coeffs })
    }
}

fn band_origin(side: usize, levels: usize, band: Band, level: usize) -> (usize, usize, usize) {
    if band == Band::LL {
        return (0, 0, side >> levels);
    }
    let h = side >> level;
    match band {
        Band::HL => (0, h, h),
        Band::LH => (h, 0, h),
        Band::HH => (h, h, h),
        Band::LL => unreachable!(),
    }
}

/// Mallat-layout index of each canonical flat position.
pub fn layout(side: usize, levels: usize) -> Vec<usize> {
    let mut order = Vec::with_capacity(side * side);
    let mut push = |r0: usize, c0: usize, h: usize| {
        for r in 0..h {
            for c in 0..h {
                order.push((r0 + r) * side + c0 + c);
            }
        }
    };
    let (r0, c0, h) = band_origin(side, levels, Band::LL, 0);
    push(r0, c0, h);
    for level in (1..=levels).rev() {
        for band in [Band::HL, Band::LH, Band::HH] {
            let (r0, c0, h) = band_origin(side, levels, band, level);
            push(r0, c0, h);
        }
    }
    order
}

pub fn cdf97_forward(pixels: &[f64], side: usize, levels: usize) -> Result<WaveletPyramid> {
    check_shape(side, pixels.len())?;
    check_levels(side, levels)?;
    let mut data = pixels.to_vec();
    let mut scratch = Vec::with_capacity(side);
    for l in 0..levels {
        let n = side >> l;
        rows(&mut data, side, n, forward_1d, &mut scratch);
        cols(&mut data, side, n, forward_1d, &mut scratch);
    }
    Ok(WaveletPyramid { side, levels, coeffs: data })
}

pub fn cdf97_inverse(pyramid: &WaveletPyramid) -> Vec<f64> {
    let side = pyramid.side;
    let mut data = pyramid.coeffs.clone();
    let mut scratch = Vec::with_capacity(side);
    for l in (0..pyramid.levels).rev() {
        let n = side >> l;
        cols(&mut data, side, n, inverse_1d, &mut scratch);
        rows(&mut data, side, n, inverse_1d, &mut scratch);
    }
    data
}

/// Applies the transpose of the forward transform to Mallat-layout
/// coefficients. This is how gradients with respect to coefficients are
/// carried back to pixels.
pub fn cdf97_forward_transposed(coeffs: &[f64], side: usize, levels: usize) -> Result<Vec<f64>> {
    check_shape(side, coeffs.len())?;
    check_levels(side, levels)?;
    let mut data = coeffs.to_vec();
    let mut scratch = Vec::with_capacity(side);
    for l in (0..levels).rev() {
        let n = side >> l;
        cols(&mut data, side, n, forward_1d_transposed, &mut scratch);
        rows(&mut data, side, n, forward_1d_transposed, &mut scratch);
    }
    Ok(data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, side: usize) -> Vec<f64> {
        (0..side * side).map(|_| rng.random::<f64>()).collect()
    }

    /// Dense matrix of a linear map on `n`-vectors, one basis vector at a time.
    fn basis_matrix(n: usize, f: impl Fn(&[f64]) -> Vec<f64>) -> Vec<Vec<f64>> {
        let mut m = vec![vec![0.0; n]; n];
        for j in 0..n {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            let col = f(&e);
            for i in 0..n {
                m[i][j] = col[i];
            }
        }
        m
    }

    #[test]
    fn constant_image_keeps_only_the_dc_coefficient() {
        let side = 16;
        let p = cdf97_forward(&vec![1.0; side * side], side, 4).unwrap();
        let flat = p.flatten();
        // Low-pass DC gain is sqrt(2) per 1-D pass, so 2 per 2-D level.
        assert!((flat[0] - 16.0).abs() < 1e-12, "{}", flat[0]);
        assert!(flat[1..].iter().all(|c| c.abs() < 1e-12));
        let p3 = cdf97_forward(&vec![3.0; side * side], side, 4).unwrap();
        assert!((p3.flatten()[0] - 48.0).abs() < 1e-11);
    }

    #[test]
    fn zero_image_gives_zero_pyramid() {
        let p = cdf97_forward(&[0.0; 64], 8, 3).unwrap();
        assert!(p.coefficients().iter().all(|&c| c == 0.0));
        let back = cdf97_inverse(&WaveletPyramid::from_coefficients(8, 3, vec![0.0; 64]).unwrap());
        assert!(back.iter().all(|&c| c == 0.0));
    }

    #[test]
    fn matches_basis_built_matrix_on_8x8() {
        let side = 8;
        let m = basis_matrix(64, |e| cdf97_forward(e, side, 3).unwrap().into_coefficients());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_image(&mut rng, side);
        let got = cdf97_forward(&x, side, 3).unwrap();
        for i in 0..64 {
            let want: f64 = (0..64).map(|j| m[i][j] * x[j]).sum();
            assert!((got.coefficients()[i] - want).abs() < 1e-10);
        }
    }

    #[test]
    fn round_trip_64() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_image(&mut rng, 64);
        let back = cdf97_inverse(&cdf97_forward(&x, 64, 6).unwrap());
        let err = x.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn transposed_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (side, levels) in [(2, 1), (8, 2), (32, 5)] {
            let x = random_image(&mut rng, side);
            let y = random_image(&mut rng, side);
            let fx = cdf97_forward(&x, side, levels).unwrap();
            let fty = cdf97_forward_transposed(&y, side, levels).unwrap();
            let lhs: f64 = fx.coefficients().iter().zip(&y).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(&fty).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
        }
    }

    #[test]
    fn flatten_order_for_two_by_two() {
        // [[a, b], [c, d]] after one level: LL top-left, HL top-right,
        // LH bottom-left, HH bottom-right.
        let p = WaveletPyramid::from_coefficients(2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(p.flatten(), vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(p.band(Band::HL, 1), vec![2.0]);
        assert_eq!(p.band(Band::LH, 1), vec![3.0]);
    }

    #[test]
    fn flatten_layout_table_side4_two_levels() {
        // Hand-enumerated: LL(0,0); level 2 HL(0,1) LH(1,0) HH(1,1);
        // level 1 HL rows 0-1 cols 2-3, LH rows 2-3 cols 0-1, HH rows 2-3 cols 2-3.
        let want = [0, 1, 4, 5, 2, 3, 6, 7, 8, 9, 12, 13, 10, 11, 14, 15];
        assert_eq!(layout(4, 2), want);
        // First HH coefficient in flat order sits at index 3 (Mallat index 5).
        assert_eq!(layout(4, 2).iter().position(|&i| i == 5), Some(3));
        // Finest HH band starts at flat index 12.
        assert_eq!(layout(4, 2)[12], 10);
    }

    #[test]
    fn unflatten_rejects_wrong_length() {
        assert!(WaveletPyramid::unflatten(4, 2, &[0.0; 15]).is_err());
        assert!(WaveletPyramid::from_coefficients(4, 2, vec![0.0; 17]).is_err());
    }

    #[test]
    fn rejects_bad_levels_and_shapes() {
        assert!(matches!(
            cdf97_forward(&[0.0; 16], 4, 3),
            Err(Error::LevelsOutOfRange { levels: 3, max: 2 })
        ));
        assert!(cdf97_forward(&[0.0; 16], 4, 0).is_err());
        assert!(cdf97_forward(&[0.0; 36], 6, 1).is_err());
        assert!(cdf97_forward(&[0.0; 15], 4, 1).is_err());
    }

    #[test]
    fn one_level_matrix_has_unit_determinant() {
        let n = 64;
        let m = basis_matrix(n, |e| {
            let mut v = e.to_vec();
            forward_1d(&mut v, &mut Vec::new());
            v
        });
        let det = determinant(m);
        assert!((det.abs() - 1.0).abs() < 1e-8, "{det}");
    }

    #[test]
    fn energy_ratio_stays_in_bracket() {
        // Regression guard: squared extreme singular values of the 8x8
        // full-depth transform matrix (0.20708 and 3.20764, measured from the
        // basis-built matrix) bound ||psi(x)||^2 / ||x||^2.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..50 {
            let x: Vec<f64> = (0..64).map(|_| rng.random::<f64>() - 0.5).collect();
            let c = cdf97_forward(&x, 8, 3).unwrap();
            let ratio = c.coefficients().iter().map(|v| v * v).sum::<f64>()
                / x.iter().map(|v| v * v).sum::<f64>();
            assert!((0.2070..3.2077).contains(&ratio), "{ratio}");
        }
    }

    pub(crate) fn determinant(mut m: Vec<Vec<f64>>) -> f64 {
        let n = m.len();
        let mut det = 1.0;
        for c in 0..n {
            let p = (c..n)
                .max_by(|&a, &b| m[a][c].abs().partial_cmp(&m[b][c].abs()).unwrap())
                .unwrap();
            if m[p][c] == 0.0 {
                return 0.0;
            }
            if p != c {
                m.swap(p, c);
                det = -det;
            }
            det *= m[c][c];
            for r in c + 1..n {
                let f = m[r][c] / m[c][c];
                for k in c..n {
                    m[r][k] -= f * m[c][k];
                }
            }
        }
        det
    }
}
