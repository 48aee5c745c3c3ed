//! Latent-space interpolation grids.

use alloc::vec::Vec;

use crate::corpus::GlyphImage;
use crate::error::{Error, Result};
use crate::model::{decode, ModelParams};

/// `(1 - t) a + t b`; returns `a` at `t = 0` and `b` at `t = 1` exactly.
pub fn lerp(a: &[f32], b: &[f32], t: f32) -> Vec<f32> {
    a.iter().zip(b).map(|(&x, &y)| (1.0 - t) * x + t * y).collect()
}

/// Fractions `0, 1/(n-1), ..., 1`.
pub fn fractions(steps: usize) -> Vec<f32> {
    (0..steps).map(|s| if s + 1 == steps { 1.0 } else { s as f32 / (steps - 1) as f32 }).collect()
}

/// `steps x steps` decodes: character embedding varies along each row,
/// font embedding down each column. `grid[0][0]` decodes `(y.0, z.0)`.
pub fn interpolate(
    params: &ModelParams,
    y: (&[f32], &[f32]),
    z: (&[f32], &[f32]),
    steps: usize,
) -> Result<Vec<Vec<GlyphImage>>> {
    if steps < 2 {
        return Err(Error::InvalidArgument(alloc::format!("steps must be >= 2, got {steps}")));
    }
    let ts = fractions(steps);
    let ys: Vec<Vec<f32>> = ts.iter().map(|&t| lerp(y.0, y.1, t)).collect();
    ts.iter()
        .map(|&t| {
            let zr = lerp(z.0, z.1, t);
            ys.iter().map(|yc| decode(params, yc, &zr)).collect()
        })
        .collect()
}
