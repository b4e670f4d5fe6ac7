//! Closed-form base capacities and a Monte Carlo check of the backward
//! equation they solve.
//!
//! Running suprema are taken over the continuous path: node values come
//! from the simulated skeleton and the maximum inside each step is drawn
//! exactly from the Brownian bridge law. Time integrals use the trapezoid
//! rule. Monitoring the supremum only at the nodes biases it down by about
//! `0.58 sigma sqrt(dt)`, which is far larger than the Monte Carlo error at
//! the path counts used here.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, invalid, FuelError, Result};
use crate::estimate::{Estimate, McConfig};
use crate::paths::{bridge_max, open_uniform, std_normal, stream_rng, streams, PathEnsemble, ShockModel};
use crate::profit::{power_moment_rate, ProfitModel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BaseCapacitySpec {
    /// `l(t) = k X(t)`.
    ScaledShock { k: f64 },
    /// `l(t) = W(t) - c`.
    ShiftedBrownian { c: f64 },
}

impl BaseCapacitySpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            BaseCapacitySpec::ScaledShock { k } => ensure(k.is_finite() && k > 0.0, || format!("k must be > 0, got {k}")),
            BaseCapacitySpec::ShiftedBrownian { c } => {
                ensure(c.is_finite() && c > 0.0, || format!("c must be > 0, got {c}"))
            }
        }
    }

    fn check_shock(&self, model: &ShockModel) -> Result<()> {
        match (self, model) {
            (BaseCapacitySpec::ScaledShock { .. }, ShockModel::GeometricBrownian { .. })
            | (BaseCapacitySpec::ShiftedBrownian { .. }, ShockModel::ArithmeticBrownian { .. }) => Ok(()),
            _ => Err(invalid(format!("base capacity {self:?} does not match shock model {model:?}"))),
        }
    }

    #[inline]
    pub fn apply(&self, v: f64) -> f64 {
        match *self {
            BaseCapacitySpec::ScaledShock { k } => k * v,
            BaseCapacitySpec::ShiftedBrownian { c } => v - c,
        }
    }
}

/// Roots of `sigma^2 x^2 / 2 + b x - delta`, computed without cancellation.
fn characteristic_roots(b: f64, sigma: f64, delta: f64) -> Result<(f64, f64)> {
    ensure(sigma.is_finite() && sigma > 0.0, || format!("sigma must be > 0, got {sigma}"))?;
    ensure(delta.is_finite() && delta > 0.0, || format!("delta must be > 0, got {delta}"))?;
    ensure(b.is_finite(), || format!("b must be finite, got {b}"))?;
    let a = 0.5 * sigma * sigma;
    let disc = b * b + 4.0 * a * delta;
    let q = -0.5 * (b + b.signum() * disc.sqrt());
    let (r1, r2) = (q / a, -delta / q);
    Ok(if r1 < r2 { (r1, r2) } else { (r2, r1) })
}

pub fn negative_root(b: f64, sigma: f64, delta: f64) -> Result<f64> {
    characteristic_roots(b, sigma, delta).map(|r| r.0)
}

pub fn positive_root(b: f64, sigma: f64, delta: f64) -> Result<f64> {
    characteristic_roots(b, sigma, delta).map(|r| r.1)
}

/// `k = [(1/delta) g / (g - alpha)]^(1/alpha)` with `g` the negative root.
pub fn cobb_douglas_k(alpha: f64, b: f64, sigma: f64, delta: f64) -> Result<f64> {
    ensure(alpha > 0.0 && alpha < 1.0, || {
        format!("alpha = {alpha} is outside the valid interval (0, 1)")
    })?;
    let g = negative_root(b, sigma, delta)?;
    let k = (g / (delta * (g - alpha))).powf(1.0 / alpha);
    // k^-a = delta (1 - a/g) > delta whenever g < 0.
    debug_assert!(k.powf(-alpha) > delta);
    Ok(k)
}

/// Drift of `ln X` from the arithmetic drift `mu`.
pub fn log_drift(mu: f64, sigma: f64) -> f64 {
    mu - 0.5 * sigma * sigma
}

/// Monte Carlo estimate of `E int_0^inf delta e^{-delta s} sup_{u<s} W(u) ds`.
pub fn quadratic_offset_c(delta: f64, mc: &McConfig) -> Result<Estimate> {
    ensure(delta.is_finite() && delta > 0.0, || format!("delta must be > 0, got {delta}"))?;
    ensure(mc.n_paths >= 2, || "need at least two paths".to_string())?;
    let grid = &mc.grid;
    let t_max = grid.t_max();
    let decay = (-delta * t_max).exp();
    if decay >= 1e-6 {
        return Err(FuelError::TailBound { bound: decay, tolerance: 1e-6 });
    }
    let dt = grid.dt();
    let sd = dt.sqrt();
    let disc: Vec<f64> = grid.nodes().iter().map(|t| delta * (-delta * t).exp()).collect();
    let seed = mc.seed;
    let samples: Vec<(f64, f64)> = (0..mc.n_paths)
        .into_par_iter()
        .map(|i| {
            let mut shock = stream_rng(seed, &[streams::SHOCK, i as u64]);
            let mut bridge = stream_rng(seed, &[streams::BRIDGE, i as u64]);
            let (mut w, mut m) = (0.0f64, 0.0f64);
            let mut acc = 0.5 * disc[0] * m;
            let n = disc.len() - 1;
            for (j, &dj) in disc.iter().enumerate().skip(1) {
                let next = w + sd * std_normal(&mut shock);
                m = running_max_step(m, w, next, dt, open_uniform(&mut bridge));
                w = next;
                let weight = if j == n { 0.5 } else { 1.0 };
                acc += weight * dj * m;
            }
            (acc * dt, m)
        })
        .collect();
    let values: Vec<f64> = samples.iter().map(|s| s.0).collect();
    let mean_max = samples.iter().map(|s| s.1).sum::<f64>() / samples.len() as f64;
    // Beyond t_max the supremum grows by at most the supremum of a fresh
    // Brownian motion, whose mean is sqrt(2u/pi).
    let tail = decay * (mean_max + (2.0 * delta).sqrt().recip());
    Ok(Estimate::from_samples(&values, tail))
}

/// Updates the running maximum `m >= a` of a unit-variance-rate Brownian
/// path over a step from `a` to `b` of variance `var`, drawing the bridge
/// maximum only when it can exceed `m`.
#[inline]
pub(crate) fn running_max_step(m: f64, a: f64, b: f64, var: f64, u: f64) -> f64 {
    let m = m.max(b);
    if var <= 0.0 {
        return m;
    }
    // P(bridge max > m) = exp(-2 (m - a)(m - b) / var).
    if u.ln() >= -2.0 * (m - a) * (m - b) / var {
        return m;
    }
    m.max(bridge_max(a, b, var, u))
}

pub fn base_capacity_paths(spec: &BaseCapacitySpec, model: &ShockModel, shock: &PathEnsemble) -> Result<PathEnsemble> {
    spec.validate()?;
    spec.check_shock(model)?;
    let spec = *spec;
    Ok(shock.map(move |v| spec.apply(v)))
}

/// Mean over simulated time-`tau` states of the backward-equation residual
///
/// * profit form: `E int_tau^inf e^{-delta s} R_y(X(s), sup_[tau,s) l) ds - e^{-delta tau}`
/// * cost form:   `E int_tau^inf delta e^{-delta s} sup_[tau,s) l ds - e^{-delta tau} W(tau)`
///
/// Beyond `t_max` the supremum is frozen at its horizon value; the size of
/// that correction is reported as the tail bound.
pub fn representation_residual(
    spec: &BaseCapacitySpec,
    model: &ShockModel,
    profit: &ProfitModel,
    delta: f64,
    tau: f64,
    mc: &McConfig,
) -> Result<Estimate> {
    let samples = residual_samples(spec, model, profit, delta, tau, mc, None)?;
    finish_residual(&samples, delta, tau)
}

/// Residual conditional on `X(tau) = x_tau` (or `W(tau) = x_tau`), estimated
/// from `mc.n_paths` continuations.
pub fn conditional_residual(
    spec: &BaseCapacitySpec,
    model: &ShockModel,
    profit: &ProfitModel,
    delta: f64,
    tau: f64,
    x_tau: f64,
    mc: &McConfig,
) -> Result<Estimate> {
    let samples = residual_samples(spec, model, profit, delta, tau, mc, Some(x_tau))?;
    finish_residual(&samples, delta, tau)
}

fn finish_residual(samples: &[(f64, f64)], delta: f64, tau: f64) -> Result<Estimate> {
    let values: Vec<f64> = samples.iter().map(|s| s.0).collect();
    let tail = samples.iter().map(|s| s.1).sum::<f64>() / samples.len() as f64;
    let tolerance = 1e-4 * (-delta * tau).exp();
    if tail > tolerance {
        return Err(FuelError::TailBound { bound: tail, tolerance });
    }
    Ok(Estimate::from_samples(&values, tail))
}

fn residual_samples(
    spec: &BaseCapacitySpec,
    model: &ShockModel,
    profit: &ProfitModel,
    delta: f64,
    tau: f64,
    mc: &McConfig,
    start: Option<f64>,
) -> Result<Vec<(f64, f64)>> {
    spec.validate()?;
    model.validate()?;
    profit.validate()?;
    spec.check_shock(model)?;
    ensure(delta.is_finite() && delta > 0.0, || format!("delta must be > 0, got {delta}"))?;
    ensure(mc.n_paths >= 2, || "need at least two paths".to_string())?;
    let grid = &mc.grid;
    let k_tau = grid
        .node_index(tau)
        .ok_or_else(|| invalid(format!("tau = {tau} is not a grid node")))?;
    ensure(k_tau < grid.n_steps(), || "tau must precede the horizon".to_string())?;
    let alpha = match (profit, spec) {
        (ProfitModel::CobbDouglas { alpha }, BaseCapacitySpec::ScaledShock { .. }) => Some(*alpha),
        (ProfitModel::QuadraticTracking, BaseCapacitySpec::ShiftedBrownian { .. }) => None,
        _ => return Err(invalid("profit model does not match the base capacity")),
    };
    let d_rate = match (alpha, model) {
        (Some(a), ShockModel::GeometricBrownian { mu, sigma, .. }) => {
            let d = power_moment_rate(a, *mu, *sigma, delta);
            if !(d > 0.0) {
                return Err(FuelError::IntegrabilityViolation { d });
            }
            d
        }
        _ => delta,
    };
    if let Some(x) = start {
        ensure(!model.is_geometric() || x > 0.0, || format!("state x must be > 0, got {x}"))?;
    }

    let dt = grid.dt();
    let n = grid.n_steps();
    let sigma = model.sigma();
    let var = sigma * sigma * dt;
    let sd = var.sqrt();
    let drift = model.log_drift() * dt;
    let disc: Vec<f64> = grid.nodes().iter().map(|t| (-delta * t).exp()).collect();
    let t_max = grid.t_max();
    let g0 = model.to_gaussian(model.initial());
    let seed = mc.seed;
    let spec = *spec;

    let samples = (0..mc.n_paths)
        .into_par_iter()
        .map(|i| {
            let mut shock = stream_rng(seed, &[streams::SHOCK, i as u64]);
            let mut bridge = stream_rng(seed, &[streams::BRIDGE, i as u64]);
            let mut g = match start {
                Some(x) => model.to_gaussian(x),
                None => {
                    let mut g = g0;
                    for _ in 0..k_tau {
                        g += drift + sd * std_normal(&mut shock);
                        let _ = open_uniform(&mut bridge);
                    }
                    g
                }
            };
            let g_tau = g;
            let mut top = g;
            let integrand = |g: f64, top: f64, j: usize| -> f64 {
                match (alpha, spec) {
                    (Some(a), BaseCapacitySpec::ScaledShock { k }) => disc[j] * k.powf(-a) * (a * (g - top)).exp(),
                    (None, BaseCapacitySpec::ShiftedBrownian { c }) => delta * disc[j] * (top - c),
                    _ => unreachable!(),
                }
            };
            let mut acc = 0.5 * integrand(g, top, k_tau);
            for j in k_tau + 1..=n {
                let next = g + drift + sd * std_normal(&mut shock);
                top = running_max_step(top, g, next, var, open_uniform(&mut bridge));
                g = next;
                let weight = if j == n { 0.5 } else { 1.0 };
                acc += weight * integrand(g, top, j);
            }
            acc *= dt;
            let decay = (-delta * t_max).exp();
            let (tail, bound) = match (alpha, spec) {
                (Some(a), BaseCapacitySpec::ScaledShock { k }) => {
                    // True tail lies in [0, frozen] because R_y falls as the supremum grows.
                    let frozen = decay * k.powf(-a) * (a * (g - top)).exp() / d_rate;
                    (frozen, frozen)
                }
                (None, BaseCapacitySpec::ShiftedBrownian { c }) => {
                    // Growth beyond the frozen supremum has mean at most 1/sqrt(2 delta).
                    (decay * (top - c), decay * sigma / (2.0 * delta).sqrt())
                }
                _ => unreachable!(),
            };
            let reference = match alpha {
                Some(_) => (-delta * tau).exp(),
                None => (-delta * tau).exp() * model.from_gaussian(g_tau),
            };
            (acc + tail - reference, bound)
        })
        .collect();
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::paths::make_grid;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn psi(x: f64, b: f64, sigma: f64, delta: f64) -> f64 {
        0.5 * sigma * sigma * x * x + b * x - delta
    }

    #[test]
    fn root_examples() {
        assert_relative_eq!(negative_root(0.0, 2f64.sqrt(), 1.0).unwrap(), -1.0, max_relative = 1e-15);
        assert_relative_eq!(negative_root(0.5, 1.0, 1.0).unwrap(), -2.0, max_relative = 1e-15);
        assert_relative_eq!(positive_root(0.5, 1.0, 1.0).unwrap(), 1.0, max_relative = 1e-15);
        assert!(negative_root(0.0, 0.0, 1.0).is_err());
        assert!(negative_root(0.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn k_examples() {
        let k = cobb_douglas_k(0.5, 0.0, 2f64.sqrt(), 1.0).unwrap();
        assert_relative_eq!(k, 4.0 / 9.0, max_relative = 1e-14);
        assert_relative_eq!(k.powf(-0.5), 1.5, max_relative = 1e-14);
        assert_relative_eq!(cobb_douglas_k(0.5, 0.5, 1.0, 1.0).unwrap(), 0.64, max_relative = 1e-14);
    }

    #[test]
    fn base_capacity_examples() {
        let g = make_grid(1.0, 2).unwrap();
        let gbm = ShockModel::GeometricBrownian { x0: 1.0, mu: 0.0, sigma: 0.0 };
        let ones = PathEnsemble::deterministic(&g, 3, |_| 1.0).unwrap();
        let l = base_capacity_paths(&BaseCapacitySpec::ScaledShock { k: 4.0 / 9.0 }, &gbm, &ones).unwrap();
        assert!(l.values().iter().all(|&v| v == 4.0 / 9.0));
        assert_eq!((l.n_paths(), l.grid()), (3, &g));

        let w = PathEnsemble::from_values(g.clone(), 1, vec![0.0, 0.5, -0.2], 0).unwrap();
        let bm = ShockModel::standard_brownian();
        let l = base_capacity_paths(&BaseCapacitySpec::ShiftedBrownian { c: 1.0 }, &bm, &w).unwrap();
        assert_eq!(l.values(), &[-1.0, -0.5, -1.2]);

        assert!(base_capacity_paths(&BaseCapacitySpec::ShiftedBrownian { c: 1.0 }, &gbm, &ones).is_err());
    }

    #[test]
    fn offset_needs_long_horizon() {
        let mc = McConfig::new(10, make_grid(5.0, 50).unwrap(), 1);
        assert!(matches!(quadratic_offset_c(1.0, &mc), Err(FuelError::TailBound { .. })));
    }

    #[test]
    fn degenerate_residual_vanishes_only_at_unit_level() {
        // With sigma = 0 and mu = 0 the integrand is e^{-s} l^{-1/2}.
        let model = ShockModel::GeometricBrownian { x0: 1.0, mu: 0.0, sigma: 0.0 };
        let profit = ProfitModel::CobbDouglas { alpha: 0.5 };
        let mc = McConfig::new(4, make_grid(20.0, 4000).unwrap(), 1);
        for tau in [0.0, 1.0] {
            let r = representation_residual(&BaseCapacitySpec::ScaledShock { k: 1.0 }, &model, &profit, 1.0, tau, &mc)
                .unwrap();
            assert!(r.mean.abs() < 1e-5, "{r:?}");
            let r = representation_residual(&BaseCapacitySpec::ScaledShock { k: 4.0 }, &model, &profit, 1.0, tau, &mc)
                .unwrap();
            assert_relative_eq!(r.mean, -0.5 * (-tau).exp(), max_relative = 1e-5);
        }
    }

    #[test]
    fn residual_rejects_off_grid_tau() {
        let model = ShockModel::GeometricBrownian { x0: 1.0, mu: 0.0, sigma: 0.3 };
        let mc = McConfig::new(4, make_grid(20.0, 100).unwrap(), 1);
        let spec = BaseCapacitySpec::ScaledShock { k: 1.0 };
        let cd = ProfitModel::CobbDouglas { alpha: 0.5 };
        assert!(representation_residual(&spec, &model, &cd, 1.0, 0.13, &mc).is_err());
    }

    proptest! {
        #[test]
        fn root_residual_small(b in -3.0f64..3.0, sigma in 0.05f64..3.0, delta in 0.01f64..5.0) {
            for r in [negative_root(b, sigma, delta).unwrap(), positive_root(b, sigma, delta).unwrap()] {
                let scale = (0.5 * sigma * sigma * r * r).max(b.abs() * r.abs()).max(delta).max(1.0);
                prop_assert!(psi(r, b, sigma, delta).abs() <= 1e-12 * scale);
            }
            prop_assert!(negative_root(b, sigma, delta).unwrap() < 0.0);
            prop_assert!(positive_root(b, sigma, delta).unwrap() > 0.0);
        }

        #[test]
        fn k_decreases_in_delta(alpha in 0.05f64..0.95, b in -1.0f64..1.0, sigma in 0.1f64..2.0, d1 in 0.05f64..3.0, dd in 0.01f64..3.0) {
            let k1 = cobb_douglas_k(alpha, b, sigma, d1).unwrap();
            let k2 = cobb_douglas_k(alpha, b, sigma, d1 + dd).unwrap();
            prop_assert!(k1 > k2);
            prop_assert!(k1.powf(-alpha) > d1);
        }
    }
}
