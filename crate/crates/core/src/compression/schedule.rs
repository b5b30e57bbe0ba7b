use serde::Serialize;

use super::CompressionError;

/// Geometric scaling sequence `r_k = sqrt(h0 * xi^k)`, floored at `r_min`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScalingSchedule {
    h0: f64,
    xi: f64,
    r_min: f64,
}

impl ScalingSchedule {
    pub const DEFAULT_R_MIN: f64 = 1e-12;

    pub fn new(h0: f64, xi: f64, r_min: f64) -> Result<Self, CompressionError> {
        if !(h0 > 0.0 && h0.is_finite()) {
            return Err(CompressionError::InvalidParameter(format!("h0 must be > 0, got {h0}")));
        }
        if !(xi > 0.0 && xi <= 1.0) {
            return Err(CompressionError::InvalidParameter(format!(
                "xi must lie in (0, 1], got {xi}"
            )));
        }
        if !(r_min > 0.0 && r_min.is_finite()) {
            return Err(CompressionError::InvalidParameter(format!(
                "r_min must be > 0, got {r_min}"
            )));
        }
        Ok(ScalingSchedule { h0, xi, r_min })
    }

    pub fn h0(&self) -> f64 {
        self.h0
    }

    pub fn xi(&self) -> f64 {
        self.xi
    }

    pub fn r_min(&self) -> f64 {
        self.r_min
    }

    /// `r_k`.
    pub fn factor(&self, k: u64) -> f64 {
        let decayed = self.h0 * self.xi.powf(k as f64);
        decayed.sqrt().max(self.r_min)
    }
}

impl Default for ScalingSchedule {
    /// `h0 = 1`, `xi = 0.98^2`, so `r_k = 0.98^k`.
    fn default() -> Self {
        ScalingSchedule { h0: 1.0, xi: 0.98 * 0.98, r_min: Self::DEFAULT_R_MIN }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn factor_examples() {
        let s = ScalingSchedule::new(1.0, 0.5, 1e-12).unwrap();
        assert_eq!(s.factor(0), 1.0);

        let s = ScalingSchedule::new(1.0, 0.9604, 1e-12).unwrap();
        assert!((s.factor(1) - 0.98).abs() < 1e-15);

        let s = ScalingSchedule::new(1.0, 0.25, 1e-12).unwrap();
        assert_eq!(s.factor(200), 1e-12);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(ScalingSchedule::new(0.0, 0.5, 1e-12).is_err());
        assert!(ScalingSchedule::new(1.0, 1.2, 1e-12).is_err());
        assert!(ScalingSchedule::new(1.0, 0.0, 1e-12).is_err());
        assert!(ScalingSchedule::new(1.0, 0.5, 0.0).is_err());
        assert!(ScalingSchedule::new(1.0, 1.0, 1e-12).is_ok());
    }

    #[test]
    fn non_increasing() {
        let s = ScalingSchedule::default();
        let mut prev = f64::INFINITY;
        for k in 0..3000 {
            let r = s.factor(k);
            assert!(r <= prev);
            assert!(r >= s.r_min());
            prev = r;
        }
    }
}
