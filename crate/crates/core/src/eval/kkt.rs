use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::dynamics::{Dynamics, MarkovState, Mesh, PlanModifier};
use crate::error::{ensure, invalid, Result};
use crate::estimate::Estimate;
use crate::paths::{
    bridge_max, open_uniform, sample_interval_maxima, simulate_shock, std_normal, stream_rng, streams, IntervalMaxima,
    PathEnsemble, TimeGrid,
};
use crate::policy::{nfirm_policy, InvestmentPlan};
use crate::profit::{Orientation, ProfitModel};

/// Outer sample: shock skeleton, exact per-step maxima and the fuel.
#[derive(Debug, Clone)]
pub struct OuterPaths {
    pub shock: PathEnsemble,
    pub maxima: IntervalMaxima,
    pub theta: PathEnsemble,
}

impl OuterPaths {
    pub fn simulate(dynamics: &Dynamics, grid: &TimeGrid, n_paths: usize, seed: u64) -> Result<Self> {
        let shock = simulate_shock(&dynamics.shock, grid, n_paths, seed)?;
        let maxima = sample_interval_maxima(&dynamics.shock, &shock, seed)?;
        let theta = crate::paths::simulate_fuel(&dynamics.fuel, grid, n_paths, seed)?;
        Ok(OuterPaths { shock, maxima, theta })
    }

    pub fn grid(&self) -> &TimeGrid {
        self.shock.grid()
    }

    pub fn n_paths(&self) -> usize {
        self.shock.n_paths()
    }
}

/// The base-rule levels and the plan actually followed on the outer paths.
#[derive(Debug, Clone)]
pub struct PlannedPaths {
    /// Running levels of `sup (l_i ∧ cap_i theta) ∨ y_i`, node `k` holding
    /// the level in force just before `t_k`.
    pub levels: InvestmentPlan,
    pub plan: InvestmentPlan,
}

/// Builds the plan of `dynamics` on the outer paths. The base capacity fed
/// to the policy at node `k` is its maximum over `[t_k, t_{k+1}]`, capped
/// by the fuel at `t_{k+1}`, so node values are running suprema over the
/// continuous path.
pub fn build_plan(dynamics: &Dynamics, outer: &OuterPaths) -> Result<PlannedPaths> {
    let n_steps = outer.grid().n_steps();
    let model = dynamics.shock;
    let mut theta_end = outer.theta.clone();
    for p in 0..theta_end.n_paths() {
        let row = theta_end.path_mut(p);
        row.copy_within(1.., 0);
    }
    let bases: Vec<PathEnsemble> = (0..dynamics.n_firms())
        .map(|i| {
            let mut e = outer.shock.clone();
            for p in 0..e.n_paths() {
                let m = outer.maxima.path(p).to_vec();
                let row = e.path_mut(p);
                for k in 0..n_steps {
                    row[k] = dynamics.base_at(i, model.to_gaussian(m[k]));
                }
                row[n_steps] = dynamics.base_at(i, model.to_gaussian(row[n_steps]));
            }
            e
        })
        .collect();
    let levels = nfirm_policy(&bases, &dynamics.weights, &theta_end, &dynamics.y())?;
    let plan = match dynamics.modifier {
        PlanModifier::None | PlanModifier::ScaledBase { .. } => levels.clone(),
        PlanModifier::Frozen => InvestmentPlan::frozen(outer.grid(), outer.n_paths(), &dynamics.y())?,
        PlanModifier::ExtraJump { .. } => {
            let mut plan = levels.clone();
            let n_firms = dynamics.n_firms();
            let mut r = vec![0.0; n_firms];
            let mut nu = vec![0.0; n_firms];
            for p in 0..outer.n_paths() {
                for k in 1..=n_steps {
                    for (i, ri) in r.iter_mut().enumerate() {
                        *ri = levels.firm(i).get(p, k);
                    }
                    dynamics.plan_from_levels(&r, outer.theta.get(p, k), &mut nu);
                    for (i, &v) in nu.iter().enumerate() {
                        plan.firm_mut(i).path_mut(p)[k] = v;
                    }
                }
            }
            plan
        }
    };
    Ok(PlannedPaths { levels, plan })
}

/// Multiplier density on the outer paths with its support mask.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiplierDensity {
    pub orientation: Orientation,
    /// Discounted density `lambda'(t_k)`, row-major like a path ensemble.
    pub values: PathEnsemble,
    pub support: Vec<bool>,
}

impl MultiplierDensity {
    /// Support nodes where the density has the wrong sign (must be empty).
    pub fn sign_violations(&self) -> usize {
        let s = self.orientation.sign();
        self.values
            .values()
            .iter()
            .zip(&self.support)
            .filter(|(v, on)| **on && s * **v <= 0.0)
            .count()
            + self.values.values().iter().zip(&self.support).filter(|(v, on)| !**on && **v != 0.0).count()
    }
}

/// `lambda'(t_k) = e^{-delta t_k} sum_i beta_i (R_y^i(X, beta_i theta) - delta)`
/// on `{sum_i l_i(t_k) > theta(t_{k+1})}` (profit case) or
/// `delta e^{-delta t_k} (theta - W)` on `{W - c > theta(t_{k+1})}` (tracking case).
///
/// The tracking density is nonpositive on its support. It is the negative
/// of the compensator increment `delta (W - theta)`, not equal to it.
pub fn lagrange_density(dynamics: &Dynamics, shock: &PathEnsemble, theta: &PathEnsemble) -> Result<MultiplierDensity> {
    ensure(shock.same_shape(theta), || "shock and fuel ensembles differ in shape".to_string())?;
    let grid = shock.grid();
    let n = grid.n_steps();
    let delta = dynamics.delta;
    let nodes = grid.nodes().to_vec();
    let mut values = shock.clone();
    let mut support = vec![false; shock.values().len()];
    let n_nodes = grid.n_nodes();
    values
        .values_mut()
        .par_chunks_mut(n_nodes)
        .zip(support.par_chunks_mut(n_nodes))
        .enumerate()
        .for_each(|(p, (row, mask))| {
            let (x, th) = (shock.path(p), theta.path(p));
            for k in 0..=n {
                let g = dynamics.shock.to_gaussian(x[k]);
                mask[k] = g > dynamics.support_level(th[(k + 1).min(n)]);
                row[k] = if mask[k] { (-delta * nodes[k]).exp() * dynamics.density(g, th[k], th[(k + 1).min(n)]) } else { 0.0 };
            }
        });
    Ok(MultiplierDensity { orientation: dynamics.orientation(), values, support })
}

/// Knobs of the nested Monte Carlo verifier.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KktConfig {
    pub inner_paths: usize,
    pub tolerance: f64,
    /// Deterministic grid times at which condition 1 is checked.
    pub taus: Vec<f64>,
    /// Outer states used per time in condition 1.
    pub states: usize,
    pub seed: u64,
}

impl Default for KktConfig {
    fn default() -> Self {
        KktConfig { inner_paths: 512, tolerance: 3.0, taus: vec![0.0, 1.0, 2.0], states: 512, seed: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionResult {
    pub name: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub firm: Option<usize>,
    pub estimate: f64,
    pub std_error: f64,
    pub tolerance: f64,
    pub n_samples: usize,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KktReport {
    pub scenario: String,
    pub orientation: Orientation,
    /// Objective of the plan on the outer paths; scales the absolute floor
    /// of the equality conditions.
    pub objective: Estimate,
    pub conditions: Vec<ConditionResult>,
    pub verdict: bool,
}

impl KktReport {
    /// Whether every entry whose name starts with `prefix` passed.
    pub fn passes(&self, prefix: &str) -> bool {
        self.conditions.iter().filter(|c| c.name.starts_with(prefix)).all(|c| c.pass)
    }
}

/// Objective value of the followed plan on the outer paths, tail included.
fn objective(dynamics: &Dynamics, outer: &OuterPaths, plan: &InvestmentPlan) -> Result<Estimate> {
    if dynamics.is_quadratic() {
        let (values, _) =
            super::tracking_cost_paths(plan, &outer.shock, dynamics.delta, dynamics.shock.sigma(), true)?;
        Ok(Estimate::from_samples(&values, 0.0))
    } else {
        let profits: Vec<ProfitModel> = dynamics.firms.iter().map(|f| f.profit).collect();
        let (per_firm, _) = super::net_profit_paths(plan, &outer.shock, &profits, dynamics.delta, &dynamics.shock, true)?;
        let total: Vec<f64> = (0..outer.n_paths()).map(|p| per_firm.iter().map(|f| f[p]).sum()).collect();
        Ok(Estimate::from_samples(&total, 0.0))
    }
}

/// Cost of one unit of investment at time `t`, discounted to 0.
fn unit_cost(dynamics: &Dynamics, t: f64) -> f64 {
    if dynamics.is_quadratic() {
        0.0
    } else {
        (-dynamics.delta * t).exp()
    }
}

/// Inner-path average of the oriented gaps `sign (grad_i - Lambda)` per firm.
fn state_gaps(dynamics: &Dynamics, mesh: &Mesh, state: &MarkovState, inner: usize, seed: u64, tag: &[u64]) -> Vec<f64> {
    let n_firms = dynamics.n_firms();
    let cost = unit_cost(dynamics, mesh.start());
    let sign = dynamics.orientation().sign();
    let mut sums = vec![0.0; n_firms];
    let mut words = Vec::with_capacity(tag.len() + 2);
    for j in 0..inner {
        words.clear();
        words.push(streams::INNER);
        words.extend_from_slice(tag);
        words.push(j as u64);
        let mut rng = stream_rng(seed, &words);
        let c = dynamics.continuation(mesh, state, &mut rng);
        for i in 0..n_firms {
            sums[i] += sign * (c.marginal[i] - cost - c.multiplier);
        }
    }
    sums.iter().map(|s| s / inner as f64).collect()
}

fn outer_state(dynamics: &Dynamics, outer: &OuterPaths, levels: &InvestmentPlan, p: usize, k: usize) -> MarkovState {
    let x = outer.shock.get(p, k);
    let before: Vec<f64> = (0..dynamics.n_firms()).map(|i| levels.firm(i).get(p, k)).collect();
    let g = dynamics.shock.to_gaussian(x);
    MarkovState { node: k, x, levels: dynamics.levels_after(&before, g, outer.theta.get(p, k)) }
}

fn equality_pass(est: &Estimate, tol: f64, objective: f64) -> bool {
    let floor = 1e-2 * objective.abs();
    let threshold = (tol * est.std_error).max(1e-12 * objective.abs());
    est.mean.abs() <= threshold && est.mean.abs() <= floor
}

/// Checks the three Kuhn-Tucker conditions for the plan of `dynamics` on
/// `outer`:
///
/// 1. `sign (grad J(tau) - E[int_tau dlambda | F_tau]) <= 0` at the configured
///    times and at the first hitting node of the multiplier support;
/// 2. `E sum_k (grad J(t_k) - Lambda(t_k)) dnu_k = 0` per firm, estimated by
///    sampling one increase step per path with probability proportional to
///    its size;
/// 3. `E sum_k (theta_{k+1} - sum_i nu_i(t_{k+1})) lambda'_k dt = 0`, plus exact
///    containment of the density support in the binding set.
pub fn kkt_report(scenario: &str, dynamics: &Dynamics, outer: &OuterPaths, cfg: &KktConfig) -> Result<KktReport> {
    ensure(cfg.inner_paths >= 2, || "need at least two inner paths".to_string())?;
    ensure(cfg.tolerance > 0.0, || "tolerance must be > 0".to_string())?;
    let grid = outer.grid().clone();
    let n = grid.n_steps();
    let n_firms = dynamics.n_firms();
    let planned = build_plan(dynamics, outer)?;
    let (levels, plan) = (&planned.levels, &planned.plan);
    let objective = objective(dynamics, outer, plan)?;
    let tol = cfg.tolerance;
    let mut conditions = Vec::new();

    // Condition 1 at deterministic times.
    let n_states = cfg.states.min(outer.n_paths()).max(2);
    for &tau in &cfg.taus {
        let k = grid.node_index(tau).ok_or_else(|| invalid(format!("tau = {tau} is not a grid node")))?;
        let mesh = dynamics.mesh(&grid, grid.time(k));
        let gaps: Vec<Vec<f64>> = (0..n_states)
            .into_par_iter()
            .map(|p| {
                let state = outer_state(dynamics, outer, levels, p, k);
                state_gaps(dynamics, &mesh, &state, cfg.inner_paths, cfg.seed, &[1, k as u64, p as u64])
            })
            .collect();
        for i in 0..n_firms {
            let col: Vec<f64> = gaps.iter().map(|g| g[i]).collect();
            let est = Estimate::from_samples(&col, 0.0);
            conditions.push(ConditionResult {
                name: "condition-1".into(),
                tau: Some(tau),
                firm: Some(i),
                estimate: est.mean,
                std_error: est.std_error,
                tolerance: tol,
                n_samples: col.len(),
                pass: est.mean <= tol * est.std_error,
            });
        }
    }

    // Condition 1 at the first node of the multiplier support.
    let density = lagrange_density(dynamics, &outer.shock, &outer.theta)?;
    let n_nodes = grid.n_nodes();
    let hits: Vec<(usize, usize)> = (0..outer.n_paths())
        .filter_map(|p| (0..n).find(|&k| density.support[p * n_nodes + k]).map(|k| (p, k)))
        .take(n_states)
        .collect();
    if hits.len() >= 2 {
        let gaps: Vec<Vec<f64>> = hits
            .par_iter()
            .map(|&(p, k)| {
                let state = outer_state(dynamics, outer, levels, p, k);
                let mesh = dynamics.mesh(&grid, grid.time(k));
                state_gaps(dynamics, &mesh, &state, cfg.inner_paths, cfg.seed, &[2, k as u64, p as u64])
            })
            .collect();
        for i in 0..n_firms {
            let col: Vec<f64> = gaps.iter().map(|g| g[i]).collect();
            let est = Estimate::from_samples(&col, 0.0);
            conditions.push(ConditionResult {
                name: "condition-1-hitting".into(),
                tau: None,
                firm: Some(i),
                estimate: est.mean,
                std_error: est.std_error,
                tolerance: tol,
                n_samples: col.len(),
                pass: est.mean <= tol * est.std_error,
            });
        }
    }

    // Condition 2, one sampled increase step per path and firm.
    let model = dynamics.shock;
    for f in 0..n_firms {
        let values: Vec<f64> = (0..outer.n_paths())
            .into_par_iter()
            .map(|p| {
                let row = plan.firm(f).path(p);
                let total = row[n] - row[0];
                if total <= 0.0 {
                    return 0.0;
                }
                let mut rng = stream_rng(cfg.seed, &[streams::SAMPLING, f as u64, p as u64]);
                let target = rng.random::<f64>() * total;
                let mut acc = 0.0;
                let mut k = n - 1;
                for j in 0..n {
                    acc += row[j + 1] - row[j];
                    if acc > target && row[j + 1] > row[j] {
                        k = j;
                        break;
                    }
                }
                while row[k + 1] <= row[k] {
                    k -= 1;
                }
                // State at the increase, placed mid-step: the shock at its
                // step maximum unless the fuel stops the increase earlier.
                let t0 = grid.time(k) + 0.5 * grid.dt();
                let theta0 = dynamics.theta(t0);
                let top = model.to_gaussian(outer.maxima.path(p)[k]);
                let stop = (0..n_firms)
                    .map(|i| dynamics.gaussian_at_level(i, dynamics.caps()[i] * theta0))
                    .fold(f64::INFINITY, f64::min);
                let g = top.min(stop);
                let before: Vec<f64> = (0..n_firms).map(|i| levels.firm(i).get(p, k)).collect();
                let state = MarkovState { node: k, x: model.from_gaussian(g), levels: dynamics.levels_after(&before, g, theta0) };
                let mesh = dynamics.mesh(&grid, t0);
                let gaps = state_gaps(dynamics, &mesh, &state, cfg.inner_paths, cfg.seed, &[3, f as u64, p as u64]);
                total * gaps[f]
            })
            .collect();
        let est = Estimate::from_samples(&values, 0.0);
        conditions.push(ConditionResult {
            name: "condition-2".into(),
            tau: None,
            firm: Some(f),
            estimate: est.mean,
            std_error: est.std_error,
            tolerance: tol,
            n_samples: values.len(),
            pass: equality_pass(&est, tol, objective.mean),
        });
    }

    // Condition 3.
    let dt = grid.dt();
    let rows: Vec<(f64, usize)> = (0..outer.n_paths())
        .into_par_iter()
        .map(|p| {
            let th = outer.theta.path(p);
            let mut acc = 0.0;
            let mut violations = 0;
            for k in 0..n {
                let lam = density.values.get(p, k);
                let used = plan.aggregate(p, k + 1);
                let slack = th[k + 1] - used;
                acc += slack * lam * dt;
                if density.support[p * n_nodes + k] && slack > 8.0 * n_firms as f64 * f64::EPSILON * th[k + 1] {
                    violations += 1;
                }
            }
            (acc, violations)
        })
        .collect();
    let values: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let violations: usize = rows.iter().map(|r| r.1).sum();
    let est = Estimate::from_samples(&values, 0.0);
    conditions.push(ConditionResult {
        name: "condition-3".into(),
        tau: None,
        firm: None,
        estimate: est.mean,
        std_error: est.std_error,
        tolerance: tol,
        n_samples: values.len(),
        pass: equality_pass(&est, tol, objective.mean),
    });
    conditions.push(ConditionResult {
        name: "condition-3-support".into(),
        tau: None,
        firm: None,
        estimate: violations as f64,
        std_error: 0.0,
        tolerance: 0.0,
        n_samples: values.len(),
        pass: violations == 0,
    });

    let verdict = conditions.iter().all(|c| c.pass);
    Ok(KktReport { scenario: scenario.to_string(), orientation: dynamics.orientation(), objective, conditions, verdict })
}

/// `grad J_i(t) = E[int_t e^{-delta s} R_y^i(X, nu_i) ds | state] - e^{-delta t}`
/// (or the cost derivative for the tracking problem), discounted to 0.
pub fn supergradient(
    dynamics: &Dynamics,
    grid: &TimeGrid,
    state: &MarkovState,
    firm: usize,
    inner_paths: usize,
    seed: u64,
) -> Result<Estimate> {
    ensure(firm < dynamics.n_firms(), || format!("no firm {firm}"))?;
    ensure(state.levels.len() == dynamics.n_firms(), || "one level per firm required".to_string())?;
    ensure(state.node <= grid.n_steps(), || "state node outside the grid".to_string())?;
    ensure(inner_paths >= 2, || "need at least two inner paths".to_string())?;
    let cost = unit_cost(dynamics, grid.time(state.node));
    let mesh = dynamics.mesh(grid, grid.time(state.node));
    let values: Vec<f64> = (0..inner_paths)
        .into_par_iter()
        .map(|j| {
            let mut rng = stream_rng(seed, &[streams::INNER, 4, state.node as u64, j as u64]);
            dynamics.continuation(&mesh, state, &mut rng).marginal[firm] - cost
        })
        .collect();
    Ok(Estimate::from_samples(&values, 0.0))
}

/// Closed-form scenarios with a known stopping representation at the optimum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SnellCase {
    /// Cobb-Douglas profit, general deterministic fuel: integral from the hitting time.
    BankGeneral,
    /// `E[e^{-delta rho} (theta0 - W(rho))]`.
    Quadratic,
    /// Cobb-Douglas with constant fuel: `E[e^{-delta rho} (theta0^-a X(rho)^a / D - 1)]`.
    CobbConstant,
}

/// Monte Carlo estimate of the Snell envelope of the supergradient at the
/// optimum from `state`, via the first time `rho >= t` the base capacity
/// exceeds the fuel.
pub fn snell_at_optimum(
    case: SnellCase,
    dynamics: &Dynamics,
    grid: &TimeGrid,
    state: &MarkovState,
    inner_paths: usize,
    seed: u64,
) -> Result<Estimate> {
    ensure(dynamics.n_firms() == 1, || "stopping representation is single-firm".to_string())?;
    ensure(inner_paths >= 2, || "need at least two inner paths".to_string())?;
    match (case, dynamics.is_quadratic()) {
        (SnellCase::Quadratic, true) => {}
        (SnellCase::BankGeneral, false) => {}
        (SnellCase::CobbConstant, false) => ensure(matches!(dynamics.fuel, crate::paths::FuelModel::Constant { .. }), || {
            "constant-fuel case needs a constant fuel".to_string()
        })?,
        _ => return Err(invalid(format!("case {case:?} does not match the scenario"))),
    }
    let n = grid.n_steps();
    let dt = grid.dt();
    let var = dynamics.shock.sigma().powi(2) * dt;
    let sd = var.sqrt();
    let drift = dynamics.shock.log_drift() * dt;
    let delta = dynamics.delta;
    let theta0 = dynamics.fuel.theta0();
    let k0 = state.node;
    let d_rate = match (dynamics.firms[0].profit, dynamics.shock) {
        (ProfitModel::CobbDouglas { alpha }, crate::paths::ShockModel::GeometricBrownian { mu, sigma, .. }) => {
            crate::profit::power_moment_rate(alpha, mu, sigma, delta)
        }
        _ => 1.0,
    };
    let meshes: Vec<Mesh> = match case {
        SnellCase::BankGeneral => (k0..=n).map(|k| dynamics.mesh(grid, grid.time(k))).collect(),
        _ => Vec::new(),
    };
    let values: Vec<f64> = (0..inner_paths)
        .into_par_iter()
        .map(|j| {
            let mut rng = stream_rng(seed, &[streams::INNER, 5, k0 as u64, j as u64]);
            let mut g = dynamics.shock.to_gaussian(state.x);
            match case {
                SnellCase::Quadratic | SnellCase::CobbConstant => {
                    // Continuous crossing of the fixed level; the crossing time
                    // inside a step is taken at its midpoint.
                    let level = dynamics.gaussian_at_level(0, theta0);
                    let payoff = |g_rho: f64| -> f64 {
                        match case {
                            SnellCase::Quadratic => theta0 - g_rho,
                            _ => {
                                let alpha = match dynamics.firms[0].profit {
                                    ProfitModel::CobbDouglas { alpha } => alpha,
                                    ProfitModel::QuadraticTracking => unreachable!(),
                                };
                                (alpha * (g_rho - theta0.ln())).exp() / d_rate - 1.0
                            }
                        }
                    };
                    if g > level {
                        return (-delta * grid.time(k0)).exp() * payoff(g);
                    }
                    for step in k0..n {
                        let next = g + drift + sd * std_normal(&mut rng);
                        let top = if var > 0.0 { bridge_max(g, next, var, open_uniform(&mut rng)) } else { g.max(next) };
                        if top > level {
                            let t = grid.time(step) + 0.5 * dt;
                            return (-delta * t).exp() * payoff(level);
                        }
                        g = next;
                    }
                    0.0
                }
                SnellCase::BankGeneral => {
                    let mut levels = state.levels.clone();
                    let mut node = k0;
                    loop {
                        let th = dynamics.theta(grid.time(node));
                        let th_plus = dynamics.theta(grid.time((node + 1).min(n)));
                        if g > dynamics.support_level(th_plus) {
                            let s = MarkovState {
                                node,
                                x: dynamics.shock.from_gaussian(g),
                                levels: dynamics.levels_after(&levels, g, th),
                            };
                            let c = dynamics.continuation(&meshes[node - k0], &s, &mut rng);
                            return c.marginal[0] - unit_cost(dynamics, grid.time(node));
                        }
                        if node == n {
                            return 0.0;
                        }
                        let next = g + drift + sd * std_normal(&mut rng);
                        let top = if var > 0.0 { bridge_max(g, next, var, open_uniform(&mut rng)) } else { g.max(next) };
                        levels = dynamics.levels_after(&levels, top, th_plus);
                        g = next;
                        node += 1;
                    }
                }
            }
        })
        .collect();
    Ok(Estimate::from_samples(&values, 0.0))
}
