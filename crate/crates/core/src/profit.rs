//! Operating profit and running cost primitives.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, invalid, FuelError, Result};

/// Whether the functional is a profit to maximize or a cost to minimize.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Orientation {
    Maximize,
    Minimize,
}

impl Orientation {
    /// +1 for maximization, -1 for minimization.
    pub fn sign(self) -> f64 {
        match self {
            Orientation::Maximize => 1.0,
            Orientation::Minimize => -1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ProfitModel {
    /// `R(x, y) = x^a y^(1-a) / (1-a)`.
    CobbDouglas { alpha: f64 },
    /// Running cost `(x - y)^2 / 2`.
    QuadraticTracking,
}

impl ProfitModel {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ProfitModel::CobbDouglas { alpha } => ensure(alpha > 0.0 && alpha < 1.0, || {
                format!("alpha = {alpha} is outside the valid interval (0, 1)")
            }),
            ProfitModel::QuadraticTracking => Ok(()),
        }
    }

    pub fn orientation(&self) -> Orientation {
        match self {
            ProfitModel::CobbDouglas { .. } => Orientation::Maximize,
            ProfitModel::QuadraticTracking => Orientation::Minimize,
        }
    }

    /// Unchecked value, for hot loops whose inputs are valid by construction.
    #[inline]
    pub(crate) fn value_unchecked(&self, x: f64, y: f64) -> f64 {
        match *self {
            ProfitModel::CobbDouglas { alpha } => {
                if y == 0.0 {
                    0.0
                } else {
                    x.powf(alpha) * y.powf(1.0 - alpha) / (1.0 - alpha)
                }
            }
            ProfitModel::QuadraticTracking => 0.5 * (x - y) * (x - y),
        }
    }

    #[inline]
    pub(crate) fn marginal_unchecked(&self, x: f64, y: f64) -> f64 {
        match *self {
            ProfitModel::CobbDouglas { alpha } => (x / y).powf(alpha),
            ProfitModel::QuadraticTracking => y - x,
        }
    }
}

/// Constant discount rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Discount {
    delta: f64,
}

impl Discount {
    pub fn new(delta: f64) -> Result<Self> {
        ensure(delta.is_finite() && delta > 0.0, || format!("delta must be > 0, got {delta}"))?;
        Ok(Discount { delta })
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    #[inline]
    pub fn factor(&self, t: f64) -> f64 {
        (-self.delta * t).exp()
    }
}

pub fn profit_value(model: &ProfitModel, x: f64, y: f64) -> Result<f64> {
    model.validate()?;
    ensure(y >= 0.0, || format!("capacity y must be >= 0, got {y}"))?;
    if let ProfitModel::CobbDouglas { .. } = model {
        ensure(x > 0.0, || format!("shock x must be > 0, got {x}"))?;
    }
    Ok(model.value_unchecked(x, y))
}

/// `R_y(x, y)`, or `dc/dy = y - x` for the tracking cost.
pub fn marginal_profit(model: &ProfitModel, x: f64, y: f64) -> Result<f64> {
    model.validate()?;
    if y <= 0.0 {
        return Err(invalid(format!("marginal profit needs y > 0, got {y}")));
    }
    if let ProfitModel::CobbDouglas { .. } = model {
        ensure(x > 0.0, || format!("shock x must be > 0, got {x}"))?;
    }
    Ok(model.marginal_unchecked(x, y))
}

/// `D = delta - mu a + sigma^2 a (1-a) / 2`, the effective discount rate of
/// `X^a` under geometric Brownian motion.
pub fn power_moment_rate(alpha: f64, mu: f64, sigma: f64, delta: f64) -> f64 {
    delta - mu * alpha + 0.5 * sigma * sigma * alpha * (1.0 - alpha)
}

/// `E int_0^inf e^{-delta s} X(s)^a ds = x^a / D` for `X(0) = x`.
pub fn discounted_power_moment(x: f64, alpha: f64, mu: f64, sigma: f64, delta: f64) -> Result<f64> {
    ensure(x > 0.0, || format!("x must be > 0, got {x}"))?;
    ensure(alpha > 0.0 && alpha < 1.0, || {
        format!("alpha = {alpha} is outside the valid interval (0, 1)")
    })?;
    ensure(sigma >= 0.0, || format!("sigma must be >= 0, got {sigma}"))?;
    ensure(delta > 0.0, || format!("delta must be > 0, got {delta}"))?;
    let d = power_moment_rate(alpha, mu, sigma, delta);
    if !(d > 0.0) {
        return Err(FuelError::IntegrabilityViolation { d });
    }
    Ok(x.powf(alpha) / d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    const CD: ProfitModel = ProfitModel::CobbDouglas { alpha: 0.5 };

    #[test]
    fn value_examples() {
        assert_eq!(profit_value(&CD, 1.0, 0.0).unwrap(), 0.0);
        assert_relative_eq!(profit_value(&CD, 1.0, 1.0).unwrap(), 2.0);
        assert_eq!(profit_value(&ProfitModel::QuadraticTracking, 3.0, 3.0).unwrap(), 0.0);
        assert!(profit_value(&CD, 1.0, -1.0).is_err());
    }

    #[test]
    fn marginal_examples() {
        assert_relative_eq!(marginal_profit(&CD, 1.0, 1.0).unwrap(), 1.0);
        assert_relative_eq!(marginal_profit(&CD, 4.0, 1.0).unwrap(), 2.0);
        assert_eq!(marginal_profit(&ProfitModel::QuadraticTracking, 2.0, 5.0).unwrap(), 3.0);
        assert!(marginal_profit(&CD, 1.0, 0.0).is_err());
    }

    #[test]
    fn inada() {
        assert!(marginal_profit(&CD, 1.0, 1e-8).unwrap() > 1e3);
        assert!(marginal_profit(&CD, 1.0, 1e8).unwrap() < 1e-3);
    }

    #[test]
    fn moment_examples() {
        assert_relative_eq!(discounted_power_moment(1.0, 0.5, 0.0, 1.0, 1.0).unwrap(), 1.0 / 1.125);
        for alpha in [0.1, 0.5, 0.9] {
            assert_relative_eq!(discounted_power_moment(1.0, alpha, 0.0, 0.0, 1.0).unwrap(), 1.0);
        }
        assert!(matches!(
            discounted_power_moment(1.0, 0.5, 4.0, 1.0, 1.0),
            Err(FuelError::IntegrabilityViolation { .. })
        ));
    }

    #[test]
    fn bad_alpha_message_names_interval() {
        let err = ProfitModel::CobbDouglas { alpha: 1.5 }.validate().unwrap_err();
        assert!(err.to_string().contains("(0, 1)"));
    }

    proptest! {
        #[test]
        fn strictly_concave(alpha in 0.05f64..0.95, x in 0.1f64..10.0, y1 in 0.01f64..5.0, dy in 0.01f64..5.0) {
            let m = ProfitModel::CobbDouglas { alpha };
            let y2 = y1 + dy;
            let mid = m.value_unchecked(x, 0.5 * (y1 + y2));
            let chord = 0.5 * (m.value_unchecked(x, y1) + m.value_unchecked(x, y2));
            prop_assert!(mid > chord);
        }

        #[test]
        fn marginal_matches_central_difference(alpha in 0.1f64..0.9, x in 0.2f64..5.0, y in 0.5f64..5.0) {
            let m = ProfitModel::CobbDouglas { alpha };
            let exact = m.marginal_unchecked(x, y);
            for h in [1e-3, 1e-4] {
                let fd = (m.value_unchecked(x, y + h) - m.value_unchecked(x, y - h)) / (2.0 * h);
                // Third derivative is bounded by ~10 x^a y^(-a-2) on this box.
                let bound = 10.0 * x.powf(alpha) * y.powf(-alpha - 2.0) * h * h + 1e-9;
                prop_assert!((exact - fd).abs() <= bound, "h={h} err={}", (exact - fd).abs());
            }
        }
    }
}
