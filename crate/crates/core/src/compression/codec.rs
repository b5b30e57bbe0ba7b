//! Differential encoding `x_hat = h + r Q((x - h) / r)` and wire accounting.

use nalgebra::DVector;
use rand::Rng;

use super::quantizer::{q2_levels, q2_value, stochastic_round};
use super::{CompressionError, CompressorSpec};

/// Bits charged per coordinate for an uncompressed value, and for the Q2 norm.
pub const FLOAT_BITS: u64 = 32;

/// Largest supported Q2 bit width; levels stay exactly representable in `f64`.
pub const MAX_Q2_BITS: u32 = 53;

/// What crosses the wire for one broadcast.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    /// Uncompressed value of `x` itself.
    Exact(DVector<f64>),
    /// Grid indices `q_i` with `Q(u)_i = q_i / delta_p`.
    Grid { indices: Vec<i64>, delta_p: u32 },
    /// Norm plus signed levels, `Q(u)_i = norm 2^{-(b-1)} level_i`.
    Scaled { norm: f64, levels: Vec<i64>, bits: u32 },
}

impl Payload {
    /// Quantizer output `Q(u)` (for `Exact`, the raw value).
    pub fn values(&self) -> DVector<f64> {
        match self {
            Payload::Exact(v) => v.clone(),
            Payload::Grid { indices, delta_p } => {
                let scale = f64::from(*delta_p);
                DVector::from_iterator(indices.len(), indices.iter().map(|&q| q as f64 / scale))
            }
            Payload::Scaled { norm, levels, bits } => DVector::from_iterator(
                levels.len(),
                levels.iter().map(|&l| q2_value(*norm, l, *bits)),
            ),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Payload::Exact(v) => v.len(),
            Payload::Grid { indices, .. } => indices.len(),
            Payload::Scaled { levels, .. } => levels.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressedMessage {
    pub payload: Payload,
    pub bits: u64,
    /// Coordinates clamped to the representable grid range.
    pub saturations: usize,
}

/// A compressor plus the clamp range that bounds grid payloads.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelCodec {
    spec: CompressorSpec,
    clamp_range: f64,
}

impl ChannelCodec {
    /// Default clamp range: seven unit grid cells, i.e. 3-bit Q1 messages at `delta_p = 1`.
    pub const DEFAULT_CLAMP_RANGE: f64 = 7.0;

    pub fn new(spec: CompressorSpec, clamp_range: f64) -> Result<Self, CompressionError> {
        spec.validate()?;
        if spec.is_grid() && !(clamp_range > 0.0 && clamp_range.is_finite()) {
            return Err(CompressionError::InvalidParameter(format!(
                "clamp_range must be > 0 for grid quantizers, got {clamp_range}"
            )));
        }
        Ok(ChannelCodec { spec, clamp_range })
    }

    pub fn identity() -> Self {
        ChannelCodec { spec: CompressorSpec::Identity, clamp_range: Self::DEFAULT_CLAMP_RANGE }
    }

    pub fn spec(&self) -> CompressorSpec {
        self.spec
    }

    pub fn clamp_range(&self) -> f64 {
        self.clamp_range
    }

    /// Bits for one message of length `n`.
    pub fn bits_per_message(&self, n: usize) -> u64 {
        bits_per_message(self.spec, n, self.clamp_range)
            .expect("codec parameters are validated at construction")
    }

    /// Inclusive range of grid indices a saturating grid payload can carry.
    fn index_range(&self, delta_p: u32) -> (f64, f64) {
        let half = self.clamp_range / 2.0 * f64::from(delta_p);
        ((-half).ceil(), half.floor())
    }

    /// Encodes `x` against reference `h` at scale `r`.
    ///
    /// Returns the sender's own reconstruction, produced by [`decode`](Self::decode)
    /// so that receivers holding the same `h` reproduce it bit for bit.
    pub fn encode<R: Rng + ?Sized>(
        &self,
        x: &DVector<f64>,
        h: &DVector<f64>,
        r: f64,
        rng: &mut R,
    ) -> Result<(DVector<f64>, CompressedMessage), CompressionError> {
        if !(r > 0.0 && r.is_finite()) {
            return Err(CompressionError::Scaling(r));
        }
        if x.len() != h.len() {
            return Err(CompressionError::InvalidParameter(format!(
                "state has length {} but reference has length {}",
                x.len(),
                h.len()
            )));
        }
        let bits = self.bits_per_message(x.len());
        let mut saturations = 0;
        let payload = match self.spec {
            CompressorSpec::Identity => {
                if x.iter().any(|v| !v.is_finite()) {
                    return Err(CompressionError::NonFinite);
                }
                Payload::Exact(x.clone())
            }
            CompressorSpec::Q1 { delta_p } | CompressorSpec::Q3 { delta_p } => {
                let stochastic = matches!(self.spec, CompressorSpec::Q1 { .. });
                let (lo, hi) = self.index_range(delta_p);
                let scale = f64::from(delta_p);
                let mut indices = Vec::with_capacity(x.len());
                for (xi, hi_ref) in x.iter().zip(h.iter()) {
                    let u = (xi - hi_ref) / r;
                    if !u.is_finite() {
                        return Err(CompressionError::NonFinite);
                    }
                    let mut s = u * scale;
                    if s < lo || s > hi {
                        saturations += 1;
                        s = s.clamp(lo, hi);
                    }
                    let q = if stochastic { stochastic_round(s, rng) } else { s.floor() };
                    indices.push(q as i64);
                }
                Payload::Grid { indices, delta_p }
            }
            CompressorSpec::Q2 { bits: b } => {
                let u = (x - h) / r;
                if u.iter().any(|v| !v.is_finite()) {
                    return Err(CompressionError::NonFinite);
                }
                let (norm, levels) = q2_levels(&u, b, rng);
                Payload::Scaled { norm, levels, bits: b }
            }
        };
        let message = CompressedMessage { payload, bits, saturations };
        let x_hat = self.decode(h, r, &message);
        Ok((x_hat, message))
    }

    /// Reconstruction `h + r Q(u)`; exact payloads decode to themselves.
    pub fn decode(&self, h: &DVector<f64>, r: f64, message: &CompressedMessage) -> DVector<f64> {
        match &message.payload {
            Payload::Exact(v) => v.clone(),
            payload => h + payload.values() * r,
        }
    }
}

fn ceil_log2(n: u64) -> u64 {
    if n <= 1 {
        0
    } else {
        u64::from(64 - (n - 1).leading_zeros())
    }
}

/// Wire size of one message of length `n`.
///
/// Grid kinds: `n ceil(log2(floor(clamp_range delta_p) + 1))`; Q2: `n b + 32`
/// for the levels plus the norm; identity: `32 n`.
pub fn bits_per_message(
    spec: CompressorSpec,
    n: usize,
    clamp_range: f64,
) -> Result<u64, CompressionError> {
    let n = n as u64;
    match spec {
        CompressorSpec::Identity => Ok(FLOAT_BITS * n),
        CompressorSpec::Q2 { bits } => Ok(n * u64::from(bits) + FLOAT_BITS),
        CompressorSpec::Q1 { delta_p } | CompressorSpec::Q3 { delta_p } => {
            if !(clamp_range > 0.0 && clamp_range.is_finite()) {
                return Err(CompressionError::InvalidParameter(format!(
                    "clamp_range must be > 0, got {clamp_range}"
                )));
            }
            let levels = (clamp_range * f64::from(delta_p)).floor() as u64 + 1;
            Ok(n * ceil_log2(levels))
        }
    }
}

/// Free-function form of [`ChannelCodec::encode`].
pub fn scaled_diff_encode<R: Rng + ?Sized>(
    x: &DVector<f64>,
    h: &DVector<f64>,
    r: f64,
    codec: &ChannelCodec,
    rng: &mut R,
) -> Result<(DVector<f64>, CompressedMessage), CompressionError> {
    codec.encode(x, h, r, rng)
}

/// `h' = (1 - alpha) h + alpha x_hat`.
pub fn reference_update(
    h: &DVector<f64>,
    x_hat: &DVector<f64>,
    alpha: f64,
) -> Result<DVector<f64>, CompressionError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(CompressionError::InvalidParameter(format!(
            "alpha must lie in [0, 1], got {alpha}"
        )));
    }
    Ok(h * (1.0 - alpha) + x_hat * alpha)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn v(values: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(values)
    }

    fn codec(spec: CompressorSpec) -> ChannelCodec {
        ChannelCodec::new(spec, 7.0).unwrap()
    }

    #[test]
    fn identity_passes_state_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = v(&[1.234_567_891, -9.87]);
        let (x_hat, msg) = ChannelCodec::identity()
            .encode(&x, &v(&[0.5, 0.5]), 0.37, &mut rng)
            .unwrap();
        assert_eq!(x_hat, x);
        assert_eq!(msg.bits, 64);
    }

    #[test]
    fn zero_difference_is_exact() {
        let x = v(&[3.25, -1.5]);
        for spec in [
            CompressorSpec::Q1 { delta_p: 1 },
            CompressorSpec::Q2 { bits: 2 },
            CompressorSpec::Q3 { delta_p: 1 },
        ] {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let (x_hat, _) = codec(spec).encode(&x, &x, 1.0, &mut rng).unwrap();
            assert_eq!(x_hat, x, "{spec:?}");
        }
    }

    #[test]
    fn q3_hand_trace() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = v(&[10.0]);
        let x = v(&[10.6]);
        let (x_hat, msg) = codec(CompressorSpec::Q3 { delta_p: 1 })
            .encode(&x, &h, 0.5, &mut rng)
            .unwrap();
        assert!((x_hat[0] - 10.5).abs() < 1e-12);
        assert!((x_hat[0] - x[0]).abs() < 0.5);
        assert_eq!(msg.payload, Payload::Grid { indices: vec![1], delta_p: 1 });
    }

    #[test]
    fn rejects_non_positive_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = v(&[1.0]);
        for r in [0.0, -1.0, f64::NAN] {
            assert!(matches!(
                codec(CompressorSpec::Q1 { delta_p: 1 }).encode(&x, &x, r, &mut rng),
                Err(CompressionError::Scaling(_))
            ));
        }
    }

    #[test]
    fn grid_payload_saturates() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (x_hat, msg) = codec(CompressorSpec::Q3 { delta_p: 1 })
            .encode(&v(&[100.0, -100.0, 0.2]), &v(&[0.0, 0.0, 0.0]), 1.0, &mut rng)
            .unwrap();
        assert_eq!(msg.saturations, 2);
        assert_eq!(x_hat, v(&[3.0, -3.0, 0.0]));
    }

    #[test]
    fn receivers_decode_bit_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = v(&[0.731, -0.052, 1.9]);
        let h = v(&[0.7, 0.1, 1.0]);
        for spec in [
            CompressorSpec::Identity,
            CompressorSpec::Q1 { delta_p: 2 },
            CompressorSpec::Q2 { bits: 3 },
            CompressorSpec::Q3 { delta_p: 4 },
        ] {
            let c = codec(spec);
            let (x_hat, msg) = c.encode(&x, &h, 0.3, &mut rng).unwrap();
            assert_eq!(c.decode(&h.clone(), 0.3, &msg), x_hat);
        }
    }

    #[test]
    fn reference_update_endpoints() {
        let h = v(&[0.0, 0.0]);
        let x_hat = v(&[2.0, 4.0]);
        assert_eq!(reference_update(&h, &x_hat, 0.0).unwrap(), h);
        assert_eq!(reference_update(&h, &x_hat, 1.0).unwrap(), x_hat);
        assert_eq!(reference_update(&h, &x_hat, 0.5).unwrap(), v(&[1.0, 2.0]));
        assert!(reference_update(&h, &x_hat, 1.5).is_err());
        assert!(reference_update(&h, &x_hat, -0.1).is_err());
    }

    #[test]
    fn bit_counts() {
        let q1 = |d| CompressorSpec::Q1 { delta_p: d };
        assert_eq!(bits_per_message(q1(1), 1, 7.0).unwrap(), 3);
        assert_eq!(bits_per_message(q1(2), 1, 7.0).unwrap(), 4);
        assert_eq!(bits_per_message(CompressorSpec::Identity, 4, 0.0).unwrap(), 128);
        assert_eq!(bits_per_message(CompressorSpec::Q2 { bits: 2 }, 3, 0.0).unwrap(), 38);
        assert_eq!(bits_per_message(CompressorSpec::Q3 { delta_p: 8 }, 2, 7.0).unwrap(), 12);
        assert!(bits_per_message(q1(1), 1, 0.0).is_err());
    }

    #[test]
    fn grid_levels_fit_in_charged_bits() {
        for delta_p in 1..=16u32 {
            for clamp in [0.5, 1.0, 3.0, 7.0, 10.0, 31.9] {
                let c = ChannelCodec::new(CompressorSpec::Q1 { delta_p }, clamp).unwrap();
                let (lo, hi) = c.index_range(delta_p);
                let levels = (hi - lo) as u64 + 1;
                let bits = c.bits_per_message(1);
                assert!(levels <= 1u64 << bits, "delta_p {delta_p}, clamp {clamp}");
            }
        }
    }
}
