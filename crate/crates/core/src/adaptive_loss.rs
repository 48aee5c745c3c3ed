//! Adaptive heavy-tailed likelihood on wavelet coefficients.
//!
//! Each coefficient position `k` carries two unconstrained latents. The shape
//! `alpha_k = 2 / (1 + exp(shape_k))` lies in `(0, 2)` and moves the density
//! between a Cauchy-like form (`alpha -> 0`) and a Normal (`alpha -> 2`); the
//! scale is `sigma_k = softplus(scale_k) / ln 2 + eps`. Both are 1 (up to
//! `eps`) when the latents are zero.
//!
//! The normaliser `log Z(alpha)` has no closed form. It is tabulated once by
//! quadrature and read back through a monotone cubic Hermite interpolant,
//! which also supplies `d log Z / d alpha` for training.

use alloc::vec::Vec;
use core::f64::consts::{LN_2, PI};

use libm::{exp, expm1, log, log1p, sqrt};

use crate::error::{Error, Result};
use crate::quadrature;
use crate::tensor::Tensor;
use crate::wavelet;

pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const TABLE_ALPHA_MIN: f64 = 1e-4;
pub const TABLE_POINTS: usize = 2048;

/// Shapes closer to 2 than this are evaluated at `2 - ALPHA_CEIL_GAP`; the
/// density there is numerically indistinguishable from the Normal.
const ALPHA_CEIL_GAP: f64 = 1e-12;
const ALPHA_FLOOR: f64 = 1e-10;

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + log1p(exp(-x))
    } else {
        log1p(exp(x))
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + exp(-x))
    } else {
        let e = exp(x);
        e / (1.0 + e)
    }
}

/// Maps latent shape/scale to `(alpha, sigma)`.
pub fn map_latents(latent_shape: f64, latent_scale: f64, epsilon: f64) -> (f64, f64) {
    let alpha = 2.0 * sigmoid(-latent_shape);
    let sigma = softplus(latent_scale) / LN_2 + epsilon;
    (alpha, sigma)
}

/// `(d alpha / d latent_shape, d sigma / d latent_scale)`.
pub fn map_latents_derivative(latent_shape: f64, latent_scale: f64) -> (f64, f64) {
    let s = sigmoid(-latent_shape);
    (-2.0 * s * (1.0 - s), sigmoid(latent_scale) / LN_2)
}

fn clamp_alpha(alpha: f64) -> f64 {
    alpha.clamp(ALPHA_FLOOR, 2.0 - ALPHA_CEIL_GAP)
}

/// Exponent of the unnormalised density, `-log f - log sigma - log Z`.
pub fn rho(residual: f64, sigma: f64, alpha: f64) -> f64 {
    rho_with_grad(residual, sigma, alpha).value
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RhoGrad {
    pub value: f64,
    pub d_residual: f64,
    pub d_sigma: f64,
    pub d_alpha: f64,
}

fn rho_with_grad(residual: f64, sigma: f64, alpha: f64) -> RhoGrad {
    let alpha = clamp_alpha(alpha);
    let b = 2.0 - alpha;
    let p = 0.5 * alpha;
    let t = residual * residual / (sigma * sigma * b);
    let l = log1p(t);
    let e = expm1(p * l);
    let pow_p = e + 1.0;
    // (1 + t)^(p - 1)
    let pow_pm1 = exp((p - 1.0) * l);
    let value = b / alpha * e;
    let d_residual = residual / (sigma * sigma) * pow_pm1;
    let d_sigma = -b * t * pow_pm1 / sigma;
    let d_alpha = -2.0 / (alpha * alpha) * e + b / (2.0 * alpha) * pow_p * l + 0.5 * t * pow_pm1;
    RhoGrad { value, d_residual, d_sigma, d_alpha }
}

/// `log Z(alpha)` evaluated directly by adaptive quadrature.
pub fn log_partition_quadrature(alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha <= 2.0) {
        return Err(Error::AlphaOutOfRange(alpha));
    }
    if alpha == 2.0 {
        return Ok(0.5 * log(2.0 * PI));
    }
    let half = quadrature::integrate_half_line(|x| exp(-rho(x, 1.0, alpha)), 1e-14);
    Ok(log(2.0 * half))
}

/// Tabulated `log Z(alpha)` with a monotone cubic Hermite interpolant.
#[derive(Clone, Debug, PartialEq)]
pub struct PartitionTable {
    alphas: Vec<f64>,
    values: Vec<f64>,
    slopes: Vec<f64>,
}

impl PartitionTable {
    /// Samples `points` values evenly on `[TABLE_ALPHA_MIN, 2]`.
    pub fn build(points: usize) -> Self {
        let alphas = Self::grid(points);
        let values = alphas
            .iter()
            .map(|&a| log_partition_quadrature(a).expect("grid inside (0, 2]"))
            .collect();
        Self::from_samples(alphas, values).expect("grid is well formed")
    }

    pub fn grid(points: usize) -> Vec<f64> {
        let step = (2.0 - TABLE_ALPHA_MIN) / (points - 1) as f64;
        (0..points)
            .map(|i| if i + 1 == points { 2.0 } else { TABLE_ALPHA_MIN + step * i as f64 })
            .collect()
    }

    /// Rebuilds a table from stored samples (e.g. a cache file).
    pub fn from_samples(alphas: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if alphas.len() != values.len() {
            return Err(Error::ShapeMismatch { expected: alphas.len(), found: values.len() });
        }
        if alphas.len() < 3 || alphas.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidArgument("partition grid must be increasing, >= 3 points".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("partition table sample".into()));
        }
        let slopes = pchip_slopes(&alphas, &values);
        Ok(Self { alphas, values, slopes })
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn log_partition(&self, alpha: f64) -> Result<f64> {
        if !(alpha > 0.0 && alpha <= 2.0) {
            return Err(Error::AlphaOutOfRange(alpha));
        }
        Ok(self.eval(alpha).0)
    }

    /// `(log Z(alpha), d log Z / d alpha)`. Below the first knot the
    /// interpolant continues linearly.
    pub fn eval(&self, alpha: f64) -> (f64, f64) {
        let n = self.alphas.len();
        if alpha <= self.alphas[0] {
            let d = self.slopes[0];
            return (self.values[0] + d * (alpha - self.alphas[0]), d);
        }
        if alpha >= self.alphas[n - 1] {
            return (self.values[n - 1], self.slopes[n - 1]);
        }
        let i = match self.alphas.binary_search_by(|a| a.partial_cmp(&alpha).unwrap()) {
            Ok(i) => return (self.values[i], self.slopes[i]),
            Err(i) => i - 1,
        };
        let h = self.alphas[i + 1] - self.alphas[i];
        let s = (alpha - self.alphas[i]) / h;
        let (y0, y1) = (self.values[i], self.values[i + 1]);
        let (m0, m1) = (self.slopes[i] * h, self.slopes[i + 1] * h);
        let s2 = s * s;
        let s3 = s2 * s;
        let value = (2.0 * s3 - 3.0 * s2 + 1.0) * y0
            + (s3 - 2.0 * s2 + s) * m0
            + (-2.0 * s3 + 3.0 * s2) * y1
            + (s3 - s2) * m1;
        let dvalue = (6.0 * s2 - 6.0 * s) * y0
            + (3.0 * s2 - 4.0 * s + 1.0) * m0
            + (-6.0 * s2 + 6.0 * s) * y1
            + (3.0 * s2 - 2.0 * s) * m1;
        (value, dvalue / h)
    }

    /// Negative log-likelihood of `x` under `f(x | mu, sigma, alpha)`.
    pub fn nll(&self, x: f64, mu: f64, sigma: f64, alpha: f64) -> Result<f64> {
        Ok(self.nll_with_grad(x, mu, sigma, alpha)?.value)
    }

    pub fn nll_with_grad(&self, x: f64, mu: f64, sigma: f64, alpha: f64) -> Result<NllGrad> {
        if !(sigma > 0.0) {
            return Err(Error::NonPositiveScale(sigma));
        }
        if !(alpha > 0.0 && alpha <= 2.0) {
            return Err(Error::AlphaOutOfRange(alpha));
        }
        let r = rho_with_grad(x - mu, sigma, alpha);
        let (log_z, d_log_z) = self.eval(alpha);
        Ok(NllGrad {
            value: r.value + log(sigma) + log_z,
            d_mu: -r.d_residual,
            d_sigma: r.d_sigma + 1.0 / sigma,
            d_alpha: r.d_alpha + d_log_z,
        })
    }

    /// NLL and gradients with respect to `mu` and the two latents.
    pub fn latent_nll_with_grad(
        &self,
        x: f64,
        mu: f64,
        latent_shape: f64,
        latent_scale: f64,
        epsilon: f64,
    ) -> LatentNllGrad {
        if !(latent_shape.is_finite() && latent_scale.is_finite()) {
            // Let the caller's finiteness check see the failure.
            let nan = f64::NAN;
            return LatentNllGrad { value: nan, d_mu: nan, d_latent_shape: nan, d_latent_scale: nan };
        }
        let (alpha, sigma) = map_latents(latent_shape, latent_scale, epsilon);
        let (da, ds) = map_latents_derivative(latent_shape, latent_scale);
        let g = self
            .nll_with_grad(x, mu, sigma, alpha.max(f64::MIN_POSITIVE))
            .expect("mapped latents are in range");
        LatentNllGrad {
            value: g.value,
            d_mu: g.d_mu,
            d_latent_shape: g.d_alpha * da,
            d_latent_scale: g.d_sigma * ds,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NllGrad {
    pub value: f64,
    pub d_mu: f64,
    pub d_sigma: f64,
    pub d_alpha: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LatentNllGrad {
    pub value: f64,
    pub d_mu: f64,
    pub d_latent_shape: f64,
    pub d_latent_scale: f64,
}

// Fritsch–Butland slopes; endpoints use the shape-preserving three-point rule.
fn pchip_slopes(x: &[f64], y: &[f64]) -> Vec<f64> {
    let n = x.len();
    let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
    let delta: Vec<f64> = (0..n - 1).map(|i| (y[i + 1] - y[i]) / h[i]).collect();
    let mut d = alloc::vec![0.0; n];
    for i in 1..n - 1 {
        let (a, b) = (delta[i - 1], delta[i]);
        if a * b > 0.0 {
            let w1 = 2.0 * h[i] + h[i - 1];
            let w2 = h[i] + 2.0 * h[i - 1];
            d[i] = (w1 + w2) / (w1 / a + w2 / b);
        }
    }
    let end = |h0: f64, h1: f64, d0: f64, d1: f64| {
        let mut s = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
        if s * d0 <= 0.0 {
            s = 0.0;
        } else if d0 * d1 <= 0.0 && s.abs() > 3.0 * d0.abs() {
            s = 3.0 * d0;
        }
        s
    };
    d[0] = end(h[0], h[1], delta[0], delta[1]);
    d[n - 1] = end(h[n - 2], h[n - 3], delta[n - 2], delta[n - 3]);
    d
}

/// Per-position latents of the wavelet likelihood, in canonical flat order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptiveLossParams {
    pub latent_shape: Tensor,
    pub latent_scale: Tensor,
    pub epsilon: f64,
}

impl AdaptiveLossParams {
    /// Zero latents (`alpha = 1`, `sigma = 1 + eps`) for a `side x side` image.
    pub fn new(side: usize, epsilon: f64) -> Self {
        Self {
            latent_shape: Tensor::zeros(&[side * side]),
            latent_scale: Tensor::zeros(&[side * side]),
            epsilon,
        }
    }

    pub fn len(&self) -> usize {
        self.latent_shape.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latent_shape.is_empty()
    }

    /// `(alpha_k, sigma_k)` for every position.
    pub fn mapped(&self) -> Vec<(f64, f64)> {
        self.latent_shape
            .data()
            .iter()
            .zip(self.latent_scale.data())
            .map(|(&a, &s)| map_latents(a as f64, s as f64, self.epsilon))
            .collect()
    }
}

/// Result of scoring one glyph: log-likelihood and its gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct GlyphScore {
    pub log_likelihood: f64,
    /// d loglik / d decoded pixel.
    pub d_decoded: Vec<f64>,
    pub d_latent_shape: Vec<f64>,
    pub d_latent_scale: Vec<f64>,
}

/// Scores images through the wavelet projection with per-coefficient
/// adaptive densities.
#[derive(Clone, Debug)]
pub struct WaveletLikelihood<'t> {
    table: &'t PartitionTable,
    side: usize,
    levels: usize,
    layout: Vec<usize>,
}

impl<'t> WaveletLikelihood<'t> {
    pub fn new(table: &'t PartitionTable, side: usize, levels: usize) -> Result<Self> {
        let max = wavelet::max_levels(side);
        if side < 2 || max == 0 {
            return Err(Error::BadImageShape { side, len: side * side });
        }
        if levels == 0 || levels > max {
            return Err(Error::LevelsOutOfRange { levels, max });
        }
        Ok(Self { table, side, levels, layout: wavelet::layout(side, levels) })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    fn check(&self, target: &[f64], decoded: &[f64], params: &AdaptiveLossParams) -> Result<()> {
        let n = self.side * self.side;
        for len in [target.len(), decoded.len(), params.len(), params.latent_scale.len()] {
            if len != n {
                return Err(Error::ShapeMismatch { expected: n, found: len });
            }
        }
        Ok(())
    }

    /// `sum_k log f(psi(target)_k | psi(decoded)_k, sigma_k, alpha_k)`.
    pub fn glyph_log_likelihood(
        &self,
        target: &[f64],
        decoded: &[f64],
        params: &AdaptiveLossParams,
    ) -> Result<f64> {
        Ok(self.score(target, decoded, params)?.log_likelihood)
    }

    pub fn score(
        &self,
        target: &[f64],
        decoded: &[f64],
        params: &AdaptiveLossParams,
    ) -> Result<GlyphScore> {
        self.check(target, decoded, params)?;
        let t = wavelet::cdf97_forward(target, self.side, self.levels)?;
        let d = wavelet::cdf97_forward(decoded, self.side, self.levels)?;
        let (tc, dc) = (t.coefficients(), d.coefficients());
        let n = self.side * self.side;
        let mut grad_coeff = alloc::vec![0.0; n];
        let mut d_shape = alloc::vec![0.0; n];
        let mut d_scale = alloc::vec![0.0; n];
        let mut total = 0.0;
        let shapes = params.latent_shape.data();
        let scales = params.latent_scale.data();
        for (k, &m) in self.layout.iter().enumerate() {
            let g = self.table.latent_nll_with_grad(
                tc[m],
                dc[m],
                shapes[k] as f64,
                scales[k] as f64,
                params.epsilon,
            );
            total -= g.value;
            grad_coeff[m] = -g.d_mu;
            d_shape[k] = -g.d_latent_shape;
            d_scale[k] = -g.d_latent_scale;
        }
        let d_decoded = wavelet::cdf97_forward_transposed(&grad_coeff, self.side, self.levels)?;
        Ok(GlyphScore {
            log_likelihood: total,
            d_decoded,
            d_latent_shape: d_shape,
            d_latent_scale: d_scale,
        })
    }
}

/// `log Z` of the Cauchy-form limit `alpha -> 0`, i.e. `log(pi * sqrt 2)`.
pub fn cauchy_limit_log_partition() -> f64 {
    log(PI * sqrt(2.0))
}

/// `log sqrt(2 pi)`.
pub fn normal_log_partition() -> f64 {
    0.5 * log(2.0 * PI)
}
