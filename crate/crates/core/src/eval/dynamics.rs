//! Markov description of a closed-form policy and its continuation from a
//! given state, used by every conditional expectation in the verifier.
//!
//! The state at a node is the shock value plus the running levels `R_i` of
//! each firm's base rule `sup (l_i ∧ cap_i theta) ∨ y_i`. Together with the
//! deterministic fuel this is enough to rebuild the plan going forward. A
//! [`PlanModifier`] maps the levels to the plan actually followed, which is
//! how perturbed (non-optimal) plans are represented.

use serde::{Deserialize, Serialize};

use crate::base_capacity::{positive_root, BaseCapacitySpec};
use crate::error::{ensure, invalid, FuelError, Result};
use crate::paths::{bridge_max, open_uniform, std_normal, FuelModel, ShockModel, TimeGrid};
use crate::policy::AllocationWeights;
use crate::profit::{power_moment_rate, Orientation, ProfitModel};

/// One firm of a closed-form scenario.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FirmSpec {
    pub profit: ProfitModel,
    pub base: BaseCapacitySpec,
    pub y: f64,
}

/// Deviation from the closed-form plan, expressed through the base levels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PlanModifier {
    None,
    /// Firm `firm` holds `amount` more than its base level from `0+` on,
    /// clamped by its own share of the fuel.
    ExtraJump { firm: usize, amount: f64 },
    /// Base capacities multiplied by `factor` (still capped by the fuel).
    ScaledBase { factor: f64 },
    /// Never invest.
    Frozen,
}

/// Shock, fuel, firms and discount of a closed-form scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct Dynamics {
    pub shock: ShockModel,
    pub fuel: FuelModel,
    pub firms: Vec<FirmSpec>,
    pub delta: f64,
    pub weights: AllocationWeights,
    pub modifier: PlanModifier,
    caps: Vec<f64>,
}

/// State at a node: shock value and per-firm base levels in force just
/// after the node.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovState {
    pub node: usize,
    pub x: f64,
    pub levels: Vec<f64>,
}

/// Per-path output of one continuation.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Continuation {
    /// `int e^{-delta s} R_y^i(X, nu_i) ds` (or the cost derivative) per firm.
    pub marginal: Vec<f64>,
    /// `int lambda'(s) ds`.
    pub multiplier: f64,
}

/// Crossing probabilities below `e^-36` are treated as zero without drawing.
const SKIP_EXPONENT: f64 = 36.0;

/// Right after an increase the gap between the running maximum and the
/// shock grows like `sqrt(s)`, which leaves a cusp in the expected
/// integrand that trapezoids on a uniform mesh resolve only to
/// `O(h^1.5)`. Continuation meshes are uniform in `sqrt(s - t0)` instead,
/// where the integrand is smooth.
const MESH_ROOT_STEP: f64 = 0.0078;

/// Continuation time mesh with the per-point constants the inner loop needs.
#[derive(Debug, Clone)]
pub(crate) struct Mesh {
    t: Vec<f64>,
    /// Quadrature weights, discount included.
    weight: Vec<f64>,
    theta: Vec<f64>,
    theta_mid: Vec<f64>,
    /// Gaussian level of the density support.
    support: Vec<f64>,
    drift: Vec<f64>,
    var: Vec<f64>,
    sd: Vec<f64>,
}

impl Mesh {
    pub(crate) fn start(&self) -> f64 {
        self.t[0]
    }
}

impl Dynamics {
    pub fn new(shock: ShockModel, fuel: FuelModel, firms: Vec<FirmSpec>, delta: f64) -> Result<Self> {
        shock.validate()?;
        fuel.validate()?;
        ensure(delta.is_finite() && delta > 0.0, || format!("delta must be > 0, got {delta}"))?;
        ensure(!firms.is_empty(), || "need at least one firm".to_string())?;
        if !fuel.is_deterministic() {
            return Err(FuelError::UnsupportedModel(
                "conditional expectations need a deterministic fuel (constant or affine)".into(),
            ));
        }
        let quadratic = matches!(firms[0].profit, ProfitModel::QuadraticTracking);
        for (i, f) in firms.iter().enumerate() {
            f.profit.validate()?;
            f.base.validate()?;
            match (f.profit, f.base, shock) {
                (ProfitModel::CobbDouglas { alpha }, BaseCapacitySpec::ScaledShock { .. }, ShockModel::GeometricBrownian { mu, sigma, .. }) => {
                    let d = power_moment_rate(alpha, mu, sigma, delta);
                    if !(d > 0.0) {
                        return Err(FuelError::IntegrabilityViolation { d });
                    }
                }
                (ProfitModel::QuadraticTracking, BaseCapacitySpec::ShiftedBrownian { .. }, ShockModel::ArithmeticBrownian { .. }) => {}
                _ => return Err(invalid(format!("firm {i}: profit, base capacity and shock do not fit together"))),
            }
            ensure(quadratic == matches!(f.profit, ProfitModel::QuadraticTracking), || {
                "all firms must share the profit family".to_string()
            })?;
        }
        ensure(!quadratic || firms.len() == 1, || "the tracking cost is single-firm".to_string())?;
        let ks: Vec<f64> = firms
            .iter()
            .map(|f| match f.base {
                BaseCapacitySpec::ScaledShock { k } => k,
                BaseCapacitySpec::ShiftedBrownian { .. } => 1.0,
            })
            .collect();
        let weights = crate::policy::allocation_weights(&ks)?;
        let caps = weights.cap_factors();
        let theta0 = fuel.theta0();
        let sum_y: f64 = firms.iter().map(|f| f.y).sum();
        if sum_y >= theta0 {
            return Err(FuelError::InfeasibleInitialization(format!(
                "sum of initial capacities {sum_y} must be below theta0 = {theta0}"
            )));
        }
        for (i, (f, c)) in firms.iter().zip(&caps).enumerate() {
            if f.y > c * theta0 && firms.len() > 1 {
                return Err(FuelError::InfeasibleInitialization(format!(
                    "y[{i}] = {} exceeds its fuel share {}",
                    f.y,
                    c * theta0
                )));
            }
        }
        Ok(Dynamics { shock, fuel, firms, delta, weights, modifier: PlanModifier::None, caps })
    }

    pub fn with_modifier(mut self, modifier: PlanModifier) -> Result<Self> {
        match modifier {
            PlanModifier::ExtraJump { firm, amount } => {
                ensure(firm < self.firms.len(), || format!("no firm {firm}"))?;
                ensure(amount >= 0.0, || format!("extra jump must be >= 0, got {amount}"))?;
            }
            PlanModifier::ScaledBase { factor } => {
                ensure(factor > 0.0, || format!("scale factor must be > 0, got {factor}"))?
            }
            PlanModifier::None | PlanModifier::Frozen => {}
        }
        self.modifier = modifier;
        Ok(self)
    }

    pub fn n_firms(&self) -> usize {
        self.firms.len()
    }

    pub fn orientation(&self) -> Orientation {
        self.firms[0].profit.orientation()
    }

    pub fn is_quadratic(&self) -> bool {
        matches!(self.firms[0].profit, ProfitModel::QuadraticTracking)
    }

    pub fn caps(&self) -> &[f64] {
        &self.caps
    }

    pub fn theta(&self, t: f64) -> f64 {
        self.fuel.deterministic_value(t).expect("deterministic fuel")
    }

    pub fn y(&self) -> Vec<f64> {
        self.firms.iter().map(|f| f.y).collect()
    }

    /// Base capacity of firm `i` (including any scaling) at Gaussian coordinate `g`.
    #[inline]
    pub(crate) fn base_at(&self, i: usize, g: f64) -> f64 {
        let v = self.firms[i].base.apply(self.shock.from_gaussian(g));
        match self.modifier {
            PlanModifier::ScaledBase { factor } => factor * v,
            _ => v,
        }
    }

    /// Gaussian coordinate at which firm `i`'s (scaled) base equals `v`, or
    /// `-inf` when no such point exists.
    pub(crate) fn gaussian_at_level(&self, i: usize, v: f64) -> f64 {
        let v = match self.modifier {
            PlanModifier::ScaledBase { factor } => v / factor,
            _ => v,
        };
        match self.firms[i].base {
            BaseCapacitySpec::ScaledShock { k } => {
                if v <= 0.0 {
                    f64::NEG_INFINITY
                } else {
                    (v / k).ln()
                }
            }
            BaseCapacitySpec::ShiftedBrownian { c } => v + c,
        }
    }

    /// Levels just after a node given the levels just before it.
    pub(crate) fn levels_after(&self, before: &[f64], g: f64, theta: f64) -> Vec<f64> {
        before
            .iter()
            .enumerate()
            .map(|(i, &r)| r.max(self.base_at(i, g).min(self.caps[i] * theta)))
            .collect()
    }

    /// Plan followed given the base levels and the fuel.
    #[inline]
    pub(crate) fn plan_from_levels(&self, levels: &[f64], theta: f64, out: &mut [f64]) {
        match self.modifier {
            PlanModifier::None | PlanModifier::ScaledBase { .. } => out.copy_from_slice(levels),
            PlanModifier::Frozen => {
                for (o, f) in out.iter_mut().zip(&self.firms) {
                    *o = f.y;
                }
            }
            PlanModifier::ExtraJump { firm, amount } => {
                // Capped by the firm's own share rather than the fuel left by
                // the others, which shrinks as they invest.
                out.copy_from_slice(levels);
                out[firm] = (levels[firm] + amount).min(self.caps[firm] * theta).max(levels[firm]);
            }
        }
    }

    /// Gaussian coordinate above which the unscaled aggregate base capacity
    /// exceeds `theta`: the support of the multiplier density.
    #[inline]
    pub(crate) fn support_level(&self, theta: f64) -> f64 {
        match self.firms[0].base {
            BaseCapacitySpec::ShiftedBrownian { c } => theta + c,
            BaseCapacitySpec::ScaledShock { .. } => {
                let total: f64 = self
                    .firms
                    .iter()
                    .map(|f| match f.base {
                        BaseCapacitySpec::ScaledShock { k } => k,
                        BaseCapacitySpec::ShiftedBrownian { .. } => unreachable!(),
                    })
                    .sum();
                (theta / total).ln()
            }
        }
    }

    /// Density value assuming `g` is on the support, undiscounted.
    #[inline]
    fn density_on(&self, g: f64, theta: f64) -> f64 {
        if self.is_quadratic() {
            return self.delta * (theta - g);
        }
        self.firms
            .iter()
            .zip(self.weights.beta())
            .map(|(f, &b)| match f.profit {
                ProfitModel::CobbDouglas { alpha } => b * ((alpha * (g - (b * theta).ln())).exp() - self.delta),
                ProfitModel::QuadraticTracking => unreachable!(),
            })
            .sum()
    }

    /// Undiscounted multiplier density at Gaussian coordinate `g` with fuel
    /// `theta` now and `theta_plus` just after.
    #[inline]
    pub(crate) fn density(&self, g: f64, theta: f64, theta_plus: f64) -> f64 {
        if g > self.support_level(theta_plus) {
            self.density_on(g, theta)
        } else {
            0.0
        }
    }

    /// Continuation value of the marginal integrand beyond the horizon with
    /// the plan frozen at its terminal level, discounted to time 0.
    pub(crate) fn marginal_tail(&self, i: usize, t_max: f64, g: f64, nu: f64) -> f64 {
        let decay = (-self.delta * t_max).exp();
        match (self.firms[i].profit, self.shock) {
            (ProfitModel::CobbDouglas { alpha }, ShockModel::GeometricBrownian { mu, sigma, .. }) => {
                decay * (alpha * (g - nu.ln())).exp() / power_moment_rate(alpha, mu, sigma, self.delta)
            }
            (ProfitModel::QuadraticTracking, _) => decay * (nu - g),
            _ => unreachable!(),
        }
    }

    /// Time mesh for continuations starting at time `t0`.
    pub(crate) fn mesh(&self, grid: &TimeGrid, t0: f64) -> Mesh {
        let span = grid.t_max() - t0;
        let mut t = vec![t0];
        if span > 0.0 {
            let parts = ((span.sqrt() / MESH_ROOT_STEP).ceil() as usize).max(1);
            for q in 1..parts {
                let r = q as f64 / parts as f64;
                t.push(t0 + span * r * r);
            }
            t.push(grid.t_max());
        }
        let m = t.len();
        let sigma = self.shock.sigma();
        let mu = self.shock.log_drift();
        // Product rule: the discount is integrated exactly against the
        // linear interpolant of the rest of the integrand.
        let delta = self.delta;
        let mut weight = vec![0.0; m];
        let (mut drift, mut var) = (Vec::with_capacity(m), Vec::with_capacity(m));
        for j in 0..m - 1 {
            let h = t[j + 1] - t[j];
            let x = delta * h;
            let total = -(-x).exp_m1() / delta;
            let right = (-(-x).exp_m1() - x * (-x).exp()) / (delta * x);
            let d0 = (-delta * t[j]).exp();
            weight[j] += d0 * (total - right);
            weight[j + 1] += d0 * right;
            drift.push(mu * h);
            var.push(sigma * sigma * h);
        }
        let theta: Vec<f64> = t.iter().map(|&s| self.theta(s)).collect();
        let theta_mid = t.windows(2).map(|w| self.theta(0.5 * (w[0] + w[1]))).collect();
        let support = theta.iter().map(|&th| self.support_level(th)).collect();
        Mesh {
            sd: var.iter().map(|v| v.sqrt()).collect(),
            t,
            weight,
            theta,
            theta_mid,
            support,
            drift,
            var,
        }
    }

    /// Simulates one continuation from `state` along `mesh`, integrating the
    /// marginal of every firm and the multiplier density. Values are discounted to time 0. Levels move with the exact
    /// maximum of the shock over each mesh step, capped by the fuel at the
    /// step end.
    pub(crate) fn continuation<R: rand::Rng>(&self, mesh: &Mesh, state: &MarkovState, rng: &mut R) -> Continuation {
        let n_firms = self.firms.len();
        let last = mesh.t.len() - 1;
        let cobb = !self.is_quadratic();
        let alphas: Vec<f64> = self
            .firms
            .iter()
            .map(|f| match f.profit {
                ProfitModel::CobbDouglas { alpha } => alpha,
                ProfitModel::QuadraticTracking => 0.0,
            })
            .collect();
        let track_theta = matches!(self.modifier, PlanModifier::ExtraJump { .. });

        let mut g = self.shock.to_gaussian(state.x);
        let mut levels = state.levels.clone();
        let mut nu = vec![0.0; n_firms];
        let mut log_nu = vec![0.0; n_firms];
        let mut marginal = vec![0.0; n_firms];
        let mut multiplier = 0.0;
        let refresh = |levels: &[f64], theta: f64, nu: &mut [f64], log_nu: &mut [f64]| {
            self.plan_from_levels(levels, theta, nu);
            if cobb {
                for (l, v) in log_nu.iter_mut().zip(nu.iter()) {
                    *l = v.ln();
                }
            }
        };
        // Gaussian level above which some firm's base would raise its level.
        let threshold = |levels: &[f64]| -> f64 {
            (0..n_firms).map(|i| self.gaussian_at_level(i, levels[i])).fold(f64::INFINITY, f64::min)
        };
        let mut thr = threshold(&levels);
        refresh(&levels, mesh.theta[0], &mut nu, &mut log_nu);

        for m in 0..=last {
            if m > 0 {
                let var = mesh.var[m - 1];
                let next = g + mesh.drift[m - 1] + mesh.sd[m - 1] * std_normal(rng);
                let hi = g.max(next);
                let top = if var <= 0.0 {
                    hi
                } else if hi > thr {
                    bridge_max(g, next, var, open_uniform(rng))
                } else {
                    let z = 2.0 * (thr - g) * (thr - next) / var;
                    if z > SKIP_EXPONENT {
                        hi
                    } else {
                        let u = open_uniform(rng);
                        if u.ln() >= -z {
                            hi
                        } else {
                            bridge_max(g, next, var, u)
                        }
                    }
                };
                let mut changed = false;
                if top > thr {
                    // Fuel at the step end if the path is still binding
                    // there, otherwise at mid-step.
                    let th = if next >= mesh.support[m] { mesh.theta[m] } else { mesh.theta_mid[m - 1] };
                    for i in 0..n_firms {
                        let cand = self.base_at(i, top).min(self.caps[i] * th);
                        if cand > levels[i] {
                            levels[i] = cand;
                            changed = true;
                        }
                    }
                    if changed {
                        thr = threshold(&levels);
                    }
                }
                g = next;
                if changed || track_theta {
                    refresh(&levels, mesh.theta[m], &mut nu, &mut log_nu);
                }
            }
            let w = mesh.weight[m];
            if w == 0.0 {
                continue;
            }
            for i in 0..n_firms {
                marginal[i] += w * if cobb {
                    (alphas[i] * (g - log_nu[i])).exp()
                } else {
                    self.delta * (nu[i] - g)
                };
            }
            if g > mesh.support[m] {
                multiplier += w * self.density_on(g, mesh.theta[m]);
            }
        }
        let t_end = mesh.t[last];
        for i in 0..n_firms {
            marginal[i] += self.marginal_tail(i, t_end, g, nu[i]);
        }
        Continuation { marginal, multiplier }
    }

    /// `k^-a / D`-type constant of the Cobb-Douglas stopping formula:
    /// `r / (r - a)` with `r` the positive characteristic root.
    pub fn cobb_stopping_ratio(&self, i: usize) -> Result<f64> {
        match (self.firms[i].profit, self.shock) {
            (ProfitModel::CobbDouglas { alpha }, ShockModel::GeometricBrownian { sigma, .. }) => {
                let r = positive_root(self.shock.log_drift(), sigma, self.delta)?;
                Ok(r / (r - alpha))
            }
            _ => Err(invalid("not a Cobb-Douglas firm")),
        }
    }
}
