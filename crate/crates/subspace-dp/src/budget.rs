//! Privacy accounting: the (epsilon, delta) pair and the Gaussian
//! calibration constant derived from it.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// An (epsilon, delta) differential-privacy budget. `delta = 0` is pure DP
/// and is what the Laplace mechanisms provide; Gaussian-family mechanisms
/// require `delta > 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyBudget {
    pub epsilon: f64,
    pub delta: f64,
}

impl PrivacyBudget {
    pub fn new(epsilon: f64, delta: f64) -> Result<Self> {
        if !epsilon.is_finite() || epsilon <= 0.0 {
            return Err(Error::InvalidBudget(format!(
                "epsilon must be positive and finite, got {epsilon}"
            )));
        }
        if !delta.is_finite() || !(0.0..1.0).contains(&delta) {
            return Err(Error::InvalidBudget(format!(
                "delta must lie in [0, 1), got {delta}"
            )));
        }
        Ok(PrivacyBudget { epsilon, delta })
    }

    pub fn pure(epsilon: f64) -> Result<Self> {
        PrivacyBudget::new(epsilon, 0.0)
    }

    /// Calibration constant for Gaussian noise:
    /// c = (1 + sqrt(1 + ln(1/delta))) / epsilon.
    /// A Gaussian mechanism with standard deviation (l2 sensitivity) * c
    /// meets the (epsilon, delta) target. Requires delta > 0.
    pub fn c_eps_delta(&self) -> Result<f64> {
        if self.delta == 0.0 {
            return Err(Error::DeltaZero);
        }
        Ok((1.0 + (1.0 + (1.0 / self.delta).ln()).sqrt()) / self.epsilon)
    }
}

/// Gaussian noise scale for a query with the given l2 sensitivity:
/// sigma = delta_2 * c_{epsilon, delta}. A zero sensitivity yields sigma = 0
/// (the release is exact and trivially private).
pub fn gaussian_calibration(budget: &PrivacyBudget, delta_2: f64) -> Result<f64> {
    if !delta_2.is_finite() || delta_2 < 0.0 {
        return Err(Error::NonFiniteInput("l2 sensitivity"));
    }
    Ok(delta_2 * budget.c_eps_delta()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn calibration_constant_reference_values() {
        let b = PrivacyBudget::new(1.0, (-3.0f64).exp()).unwrap();
        assert!((b.c_eps_delta().unwrap() - 3.0).abs() < 1e-12);

        let b = PrivacyBudget::new(2.0, (-3.0f64).exp()).unwrap();
        assert!((b.c_eps_delta().unwrap() - 1.5).abs() < 1e-12);

        // sigma for epsilon = 0.192, delta = 1e-6, delta_2 = sqrt(2);
        // frozen against an independent evaluation of the formula.
        let b = PrivacyBudget::new(0.192, 1e-6).unwrap();
        let sigma = gaussian_calibration(&b, 2f64.sqrt()).unwrap();
        assert!((sigma - 35.71693706546236).abs() < 1e-10, "sigma = {sigma}");
    }

    #[test]
    fn delta_zero_is_rejected_for_gaussian_calibration() {
        let b = PrivacyBudget::pure(1.0).unwrap();
        assert!(matches!(b.c_eps_delta(), Err(Error::DeltaZero)));
    }

    #[test]
    fn zero_sensitivity_gives_zero_sigma() {
        let b = PrivacyBudget::new(1.0, 1e-6).unwrap();
        assert_eq!(gaussian_calibration(&b, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn invalid_budgets_are_rejected() {
        assert!(PrivacyBudget::new(0.0, 0.5).is_err());
        assert!(PrivacyBudget::new(-1.0, 0.0).is_err());
        assert!(PrivacyBudget::new(1.0, 1.0).is_err());
        assert!(PrivacyBudget::new(1.0, -0.1).is_err());
        assert!(PrivacyBudget::new(f64::NAN, 0.0).is_err());
    }
}
