//! Compressors, the scaled differential codec, and message bit accounting.

mod codec;
mod quantizer;
mod schedule;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use codec::{
    bits_per_message, reference_update, scaled_diff_encode, ChannelCodec, CompressedMessage,
    Payload, FLOAT_BITS, MAX_Q2_BITS,
};
pub use quantizer::{q1_compress, q2_compress, q3_compress};
pub use schedule::ScalingSchedule;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CompressionError {
    #[error("non-finite value passed to a compressor")]
    NonFinite,
    #[error("invalid compressor parameter: {0}")]
    InvalidParameter(String),
    #[error("scaling factor must be positive and finite, got {0}")]
    Scaling(f64),
}

/// Which compressor the agents use on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CompressorSpec {
    /// No compression; 32 bits per coordinate.
    #[default]
    Identity,
    /// Unbiased probabilistic rounding onto the `1/delta_p` grid.
    #[serde(alias = "q1_probabilistic")]
    Q1 { delta_p: u32 },
    /// Unbiased `b`-bit quantizer with infinity-norm scaling.
    #[serde(alias = "q2_norm_bbit")]
    Q2 { bits: u32 },
    /// Biased truncation onto the `1/delta_p` grid.
    #[serde(alias = "q3_truncation")]
    Q3 { delta_p: u32 },
}

impl CompressorSpec {
    pub fn validate(&self) -> Result<(), CompressionError> {
        match *self {
            CompressorSpec::Identity => Ok(()),
            CompressorSpec::Q1 { delta_p } | CompressorSpec::Q3 { delta_p } if delta_p == 0 => Err(
                CompressionError::InvalidParameter("delta_p must be >= 1".into()),
            ),
            CompressorSpec::Q2 { bits } if bits == 0 || bits > MAX_Q2_BITS => {
                Err(CompressionError::InvalidParameter(format!(
                    "bits must lie in 1..={MAX_Q2_BITS}, got {bits}"
                )))
            }
            _ => Ok(()),
        }
    }

    /// Grid quantizers carry indices bounded by a clamp range.
    pub fn is_grid(&self) -> bool {
        matches!(self, CompressorSpec::Q1 { .. } | CompressorSpec::Q3 { .. })
    }

    pub fn is_stochastic(&self) -> bool {
        matches!(self, CompressorSpec::Q1 { .. } | CompressorSpec::Q2 { .. })
    }

    pub fn name(&self) -> &'static str {
        match self {
            CompressorSpec::Identity => "identity",
            CompressorSpec::Q1 { .. } => "q1",
            CompressorSpec::Q2 { .. } => "q2",
            CompressorSpec::Q3 { .. } => "q3",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_validation() {
        assert!(CompressorSpec::Q1 { delta_p: 0 }.validate().is_err());
        assert!(CompressorSpec::Q3 { delta_p: 0 }.validate().is_err());
        assert!(CompressorSpec::Q2 { bits: 0 }.validate().is_err());
        assert!(CompressorSpec::Q2 { bits: 54 }.validate().is_err());
        assert!(CompressorSpec::Q2 { bits: 32 }.validate().is_ok());
    }

    #[test]
    fn serde_names() {
        let q1: CompressorSpec =
            serde_json::from_str(r#"{"kind":"q1_probabilistic","delta_p":2}"#).unwrap();
        assert_eq!(q1, CompressorSpec::Q1 { delta_p: 2 });
        let json = serde_json::to_string(&CompressorSpec::Q2 { bits: 4 }).unwrap();
        assert_eq!(json, r#"{"kind":"q2","bits":4}"#);
    }
}
