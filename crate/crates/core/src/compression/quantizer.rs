//! Elementwise quantizers. All randomness comes from the caller's stream.

use nalgebra::DVector;
use rand::Rng;

use super::CompressionError;

/// Probabilistic rounding of `s` (already scaled to grid units) to an adjacent
/// integer: up with probability `s - floor(s)`. Returns the integer as `f64`.
pub(crate) fn stochastic_round<R: Rng + ?Sized>(s: f64, rng: &mut R) -> f64 {
    let lower = s.floor();
    let up_probability = s - lower;
    if rng.random::<f64>() < up_probability {
        lower + 1.0
    } else {
        lower
    }
}

/// Unbiased probabilistic quantizer onto the grid `Z / delta_p`.
///
/// Each entry rounds down to `floor_p(x)` with probability
/// `(ceil_p(x) - x) delta_p` and up otherwise, so `E[Q1(x)] = x` and the
/// per-entry error never exceeds `1 / delta_p`.
pub fn q1_compress<R: Rng + ?Sized>(
    x: &DVector<f64>,
    delta_p: u32,
    rng: &mut R,
) -> Result<DVector<f64>, CompressionError> {
    if delta_p == 0 {
        return Err(CompressionError::InvalidParameter("delta_p must be >= 1".into()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(CompressionError::NonFinite);
    }
    let scale = f64::from(delta_p);
    Ok(x.map(|v| stochastic_round(v * scale, rng) / scale))
}

/// `b`-bit quantizer with infinity-norm scaling:
/// `Q2(x) = (||x||_inf 2^{-(b-1)} sign(x)) .* floor(2^{b-1} |x| / ||x||_inf + mu)`,
/// `mu ~ U[0,1)^n`. The zero vector maps to itself.
///
/// Returns the norm and the signed integer levels that cross the wire.
pub(crate) fn q2_levels<R: Rng + ?Sized>(
    x: &DVector<f64>,
    bits: u32,
    rng: &mut R,
) -> (f64, Vec<i64>) {
    let norm = x.amax();
    let scale = 2f64.powi(bits as i32 - 1);
    let levels = x
        .iter()
        .map(|&v| {
            // one draw per coordinate, zero-norm or not, keeps streams aligned
            let mu = rng.random::<f64>();
            if norm == 0.0 {
                return 0;
            }
            let level = (scale * v.abs() / norm + mu).floor() as i64;
            if v < 0.0 {
                -level
            } else {
                level
            }
        })
        .collect();
    (norm, levels)
}

pub(crate) fn q2_value(norm: f64, level: i64, bits: u32) -> f64 {
    norm * 2f64.powi(1 - bits as i32) * level as f64
}

pub fn q2_compress<R: Rng + ?Sized>(x: &DVector<f64>, bits: u32, rng: &mut R) -> DVector<f64> {
    let (norm, levels) = q2_levels(x, bits, rng);
    DVector::from_iterator(x.len(), levels.into_iter().map(|l| q2_value(norm, l, bits)))
}

/// Deterministic truncation onto the grid `Z / delta_p`: `floor(x delta_p) / delta_p`.
pub fn q3_compress(x: &DVector<f64>, delta_p: u32) -> DVector<f64> {
    let scale = f64::from(delta_p.max(1));
    x.map(|v| (v * scale).floor() / scale)
}
