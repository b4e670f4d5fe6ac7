//! Brute-force oracle: backward induction on a recombining lattice with
//! quantized cumulative investment, for one or two firms.
//!
//! The discrete problem mirrors the Monte Carlo conventions of
//! [`crate::eval`]: the running reward at node `k` uses the level held just
//! before the node, an increment chosen at node `k` is paid at
//! `e^{-delta t_k}` and must respect the fuel at `t_{k+1}`, and the horizon
//! value is the frozen-plan continuation.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{ensure, invalid, FuelError, Result};
use crate::estimate::Estimate;
use crate::eval::{net_profit_paths, tracking_cost_paths, Dynamics, PlanModifier};
use crate::paths::{simulate_shock, FuelModel, PathEnsemble, ShockModel, TimeGrid};
use crate::policy::{nfirm_policy, InvestmentPlan};
use crate::profit::{power_moment_rate, Orientation, ProfitModel};

/// Recombining binomial lattice. Node `j` of step `k` sits `2j - k` ticks
/// of size `sigma sqrt(dt)` above the start in the Gaussian coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct Lattice {
    grid: TimeGrid,
    model: ShockModel,
    tick: f64,
    p: f64,
}

pub fn build_lattice(model: &ShockModel, grid: &TimeGrid) -> Result<Lattice> {
    model.validate()?;
    let dt = grid.dt();
    let sigma = model.sigma();
    let tick = sigma * dt.sqrt();
    let p = match *model {
        ShockModel::GeometricBrownian { mu, .. } => {
            if sigma == 0.0 {
                if mu != 0.0 {
                    return Err(FuelError::UnstableDiscretization { p: f64::NAN });
                }
                0.5
            } else {
                let (u, d) = (tick.exp(), (-tick).exp());
                ((mu * dt).exp() - d) / (u - d)
            }
        }
        ShockModel::ArithmeticBrownian { .. } => 0.5,
    };
    if !(p > 0.0 && p < 1.0) {
        return Err(FuelError::UnstableDiscretization { p });
    }
    Ok(Lattice { grid: grid.clone(), model: *model, tick, p })
}

impl Lattice {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    /// Probability of an up move.
    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn n_nodes(&self, step: usize) -> usize {
        step + 1
    }

    pub fn value(&self, step: usize, node: usize) -> f64 {
        let g = self.model.to_gaussian(self.model.initial()) + self.tick * (2.0 * node as f64 - step as f64);
        self.model.from_gaussian(g)
    }

    /// Exact lattice mean of the shock at `step`.
    pub fn mean(&self, step: usize) -> f64 {
        let mut probs = vec![1.0];
        for _ in 0..step {
            let mut next = vec![0.0; probs.len() + 1];
            for (j, &q) in probs.iter().enumerate() {
                next[j] += (1.0 - self.p) * q;
                next[j + 1] += self.p * q;
            }
            probs = next;
        }
        probs.iter().enumerate().map(|(j, q)| q * self.value(step, j)).sum()
    }
}

/// Quantized cumulative investment: firm `i` holds `y_i + j h`,
/// `j = 0..levels`, with `h = (theta_max - sum y) / (levels - 1)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FuelGrid {
    pub y: Vec<f64>,
    pub step: f64,
    pub levels: usize,
}

pub fn fuel_grid(y: &[f64], theta_max: f64, levels: usize) -> Result<FuelGrid> {
    ensure(!y.is_empty() && y.len() <= 2, || format!("the oracle handles 1 or 2 firms, got {}", y.len()))?;
    ensure(levels >= 2, || format!("need at least 2 fuel levels, got {levels}"))?;
    ensure(levels <= u16::MAX as usize, || format!("at most {} fuel levels, got {levels}", u16::MAX))?;
    for (i, &v) in y.iter().enumerate() {
        ensure(v.is_finite() && v >= 0.0, || format!("y[{i}] must be >= 0, got {v}"))?;
    }
    let sum_y: f64 = y.iter().sum();
    if !(theta_max > sum_y) {
        return Err(FuelError::InfeasibleInitialization(format!(
            "sum of initial capacities {sum_y} must be below the fuel {theta_max}"
        )));
    }
    Ok(FuelGrid { y: y.to_vec(), step: (theta_max - sum_y) / (levels - 1) as f64, levels })
}

impl FuelGrid {
    pub fn n_firms(&self) -> usize {
        self.y.len()
    }

    pub fn n_states(&self) -> usize {
        self.levels.pow(self.y.len() as u32)
    }

    pub fn level(&self, firm: usize, index: usize) -> f64 {
        self.y[firm] + self.step * index as f64
    }

    /// Largest index whose level does not exceed `v` (0 below `y`).
    pub fn floor_index(&self, firm: usize, v: f64) -> usize {
        let j = ((v - self.y[firm]) / self.step * (1.0 + 1e-12)).floor();
        if j <= 0.0 {
            0
        } else {
            (j as usize).min(self.levels - 1)
        }
    }

    fn unpack(&self, s: usize) -> [usize; 2] {
        if self.y.len() == 1 {
            [s, 0]
        } else {
            [s / self.levels, s % self.levels]
        }
    }

    fn pack(&self, idx: &[usize]) -> usize {
        if self.y.len() == 1 {
            idx[0]
        } else {
            idx[0] * self.levels + idx[1]
        }
    }

    fn total(&self, s: usize) -> f64 {
        let idx = self.unpack(s);
        (0..self.n_firms()).map(|i| self.level(i, idx[i])).sum()
    }

    fn admissible(&self, s: usize, theta: f64) -> bool {
        self.total(s) <= theta * (1.0 + 1e-12)
    }
}

/// Knobs of [`dp_solve`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DpConfig {
    pub fuel_levels: usize,
    pub memory_budget_bytes: u64,
}

impl Default for DpConfig {
    fn default() -> Self {
        DpConfig { fuel_levels: 101, memory_budget_bytes: 2 << 30 }
    }
}

/// Optimal increments `(step, node, state) -> target state`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyTable {
    fuel: FuelGrid,
    /// Per step, row-major `(node, state)`.
    targets: Vec<Vec<u32>>,
}

impl PolicyTable {
    pub fn fuel_grid(&self) -> &FuelGrid {
        &self.fuel
    }

    pub fn n_steps(&self) -> usize {
        self.targets.len()
    }

    /// Per-firm level indices held after the decision at `(step, node)`.
    pub fn target(&self, step: usize, node: usize, state: &[usize]) -> Vec<usize> {
        let s = self.fuel.pack(state);
        let t = self.targets[step][node * self.fuel.n_states() + s] as usize;
        self.fuel.unpack(t)[..self.fuel.n_firms()].to_vec()
    }

    /// States visited by the optimal policy from the initial state, per step.
    fn on_path(&self) -> Vec<Vec<(usize, usize)>> {
        let mut out = Vec::with_capacity(self.targets.len());
        let mut current: Vec<(usize, usize)> = vec![(0, 0)];
        for k in 0..self.targets.len() {
            let mut next = std::collections::BTreeSet::new();
            for &(j, s) in &current {
                let t = self.targets[k][j * self.fuel.n_states() + s] as usize;
                next.insert((j, t));
                next.insert((j + 1, t));
            }
            out.push(current);
            current = next.into_iter().collect();
        }
        out
    }

    /// CSV of the decisions on the states the optimal policy visits:
    /// `step,node,state_i...,increment_i...` with increments in capacity units.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let n = self.fuel.n_firms();
        let mut header = vec!["step".to_string(), "node".to_string()];
        header.extend((0..n).map(|i| format!("state_{i}")));
        header.extend((0..n).map(|i| format!("increment_{i}")));
        writeln!(out, "{}", header.join(","))?;
        for (k, states) in self.on_path().iter().enumerate() {
            for &(j, s) in states {
                let from = self.fuel.unpack(s);
                let to = self.fuel.unpack(self.targets[k][j * self.fuel.n_states() + s] as usize);
                let mut row = vec![k.to_string(), j.to_string()];
                row.extend((0..n).map(|i| from[i].to_string()));
                row.extend((0..n).map(|i| format!("{}", (to[i] - from[i]) as f64 * self.fuel.step)));
                writeln!(out, "{}", row.join(","))?;
            }
        }
        Ok(())
    }
}

/// Value of the discrete problem (profit for Cobb-Douglas, cost for the
/// tracking problem) and its optimal policy.
#[derive(Debug, Clone, PartialEq)]
pub struct DpSolution {
    pub value: f64,
    pub orientation: Orientation,
    pub policy: PolicyTable,
}

/// Shared pieces of the solver and the fixed-policy evaluator.
struct Problem<'a> {
    lattice: &'a Lattice,
    fuel: &'a FuelModel,
    profits: &'a [ProfitModel],
    delta: f64,
    grid: FuelGrid,
}

impl<'a> Problem<'a> {
    fn new(
        lattice: &'a Lattice,
        fuel: &'a FuelModel,
        profits: &'a [ProfitModel],
        delta: f64,
        y: &[f64],
        levels: usize,
    ) -> Result<Self> {
        fuel.validate()?;
        if !fuel.is_deterministic() {
            return Err(FuelError::UnsupportedModel("the oracle needs a deterministic fuel".into()));
        }
        ensure(delta.is_finite() && delta > 0.0, || format!("delta must be > 0, got {delta}"))?;
        ensure(profits.len() == y.len(), || format!("{} profit models for {} firms", profits.len(), y.len()))?;
        let quadratic = matches!(profits[0], ProfitModel::QuadraticTracking);
        for p in profits {
            p.validate()?;
            ensure(quadratic == matches!(p, ProfitModel::QuadraticTracking), || {
                "all firms must share the profit family".to_string()
            })?;
            match (p, lattice.model) {
                (ProfitModel::CobbDouglas { alpha }, ShockModel::GeometricBrownian { mu, sigma, .. }) => {
                    let d = power_moment_rate(*alpha, mu, sigma, delta);
                    if !(d > 0.0) {
                        return Err(FuelError::IntegrabilityViolation { d });
                    }
                }
                (ProfitModel::QuadraticTracking, ShockModel::ArithmeticBrownian { .. }) => {}
                _ => return Err(invalid("profit model and shock do not fit together")),
            }
        }
        ensure(!quadratic || y.len() == 1, || "the tracking cost is single-firm".to_string())?;
        let grid = lattice.grid();
        let theta_max = (0..=grid.n_steps()).map(|k| fuel.deterministic_value(grid.time(k)).unwrap()).fold(0.0, f64::max);
        let grid = fuel_grid(y, theta_max, levels)?;
        Ok(Problem { lattice, fuel, profits, delta, grid })
    }

    fn quadratic(&self) -> bool {
        matches!(self.profits[0], ProfitModel::QuadraticTracking)
    }

    fn theta(&self, step: usize) -> f64 {
        self.fuel.deterministic_value(self.lattice.grid.time(step)).unwrap()
    }

    /// Running reward at `(step, node)` for every state, to be maximized.
    fn rewards(&self, step: usize, node: usize, out: &mut [f64]) {
        let t = self.lattice.grid.time(step);
        let w = (-self.delta * t).exp() * self.lattice.grid.dt();
        let x = self.lattice.value(step, node);
        for (s, o) in out.iter_mut().enumerate() {
            let idx = self.grid.unpack(s);
            *o = if self.quadratic() {
                let nu = self.grid.level(0, idx[0]);
                -w * self.delta * 0.5 * (x - nu) * (x - nu)
            } else {
                (0..self.grid.n_firms()).map(|i| w * self.profits[i].value_unchecked(x, self.grid.level(i, idx[i]))).sum()
            };
        }
    }

    /// Frozen-plan value beyond the horizon, to be maximized.
    fn terminal(&self, node: usize, out: &mut [f64]) {
        let n = self.lattice.grid.n_steps();
        let decay = (-self.delta * self.lattice.grid.t_max()).exp();
        let x = self.lattice.value(n, node);
        for (s, o) in out.iter_mut().enumerate() {
            let idx = self.grid.unpack(s);
            *o = match self.lattice.model {
                ShockModel::ArithmeticBrownian { sigma, .. } => {
                    let nu = self.grid.level(0, idx[0]);
                    -decay * (0.5 * (x - nu) * (x - nu) + 0.5 * sigma * sigma / self.delta)
                }
                ShockModel::GeometricBrownian { mu, sigma, .. } => (0..self.grid.n_firms())
                    .map(|i| {
                        let alpha = match self.profits[i] {
                            ProfitModel::CobbDouglas { alpha } => alpha,
                            ProfitModel::QuadraticTracking => unreachable!(),
                        };
                        decay * self.profits[i].value_unchecked(x, self.grid.level(i, idx[i]))
                            / power_moment_rate(alpha, mu, sigma, self.delta)
                    })
                    .sum(),
            };
        }
    }

    /// Investment cost per unit at `step`, as a reward coefficient.
    fn unit_cost(&self, step: usize) -> f64 {
        if self.quadratic() {
            0.0
        } else {
            (-self.delta * self.lattice.grid.time(step)).exp() * self.grid.step
        }
    }

    fn index_sum(&self, s: usize) -> f64 {
        let idx = self.grid.unpack(s);
        (idx[0] + if self.grid.n_firms() == 2 { idx[1] } else { 0 }) as f64
    }

    fn required_bytes(&self) -> u64 {
        let n = self.lattice.grid.n_steps() as u64;
        let s = self.grid.n_states() as u64;
        n * (n + 1) / 2 * s * 4 + 2 * (n + 2) * s * 8
    }

    /// Backward induction. With `fixed`, the decision at each state is
    /// given (clamped to be feasible) instead of optimized.
    fn induct(&self, fixed: Option<&(dyn Fn(usize, usize, &[usize]) -> Vec<usize> + Sync)>) -> (f64, Vec<Vec<u32>>) {
        let n = self.lattice.grid.n_steps();
        let ns = self.grid.n_states();
        let mut next = vec![0.0; (n + 1) * ns];
        next.par_chunks_mut(ns).enumerate().for_each(|(j, row)| self.terminal(j, row));
        let mut targets = vec![Vec::new(); n];
        let p = self.lattice.p;
        for k in (0..n).rev() {
            let theta_next = self.theta(k + 1);
            let cost = self.unit_cost(k);
            let adm: Vec<bool> = (0..ns).map(|s| self.grid.admissible(s, theta_next)).collect();
            let mut cur = vec![0.0; (k + 1) * ns];
            let mut tgt = vec![0u32; (k + 1) * ns];
            cur.par_chunks_mut(ns).zip(tgt.par_chunks_mut(ns)).enumerate().for_each(|(j, (row, trow))| {
                let (down, up) = (&next[j * ns..(j + 1) * ns], &next[(j + 1) * ns..(j + 2) * ns]);
                // Continuation of each post-decision state, net of its cost.
                let c: Vec<f64> = (0..ns).map(|s| p * up[s] + (1.0 - p) * down[s] - cost * self.index_sum(s)).collect();
                let mut best = vec![0u32; ns];
                match fixed {
                    Some(policy) => {
                        for s in 0..ns {
                            let from = self.grid.unpack(s);
                            let want = policy(k, j, &from[..self.grid.n_firms()]);
                            let mut to = [0usize; 2];
                            for i in 0..self.grid.n_firms() {
                                to[i] = want[i].max(from[i]).min(self.grid.levels - 1);
                            }
                            let t = self.grid.pack(&to[..self.grid.n_firms()]);
                            best[s] = if adm[t] { t as u32 } else { s as u32 };
                        }
                    }
                    None => self.best_targets(&c, &adm, &mut best),
                }
                self.rewards(k, j, row);
                for s in 0..ns {
                    row[s] += c[best[s] as usize] + cost * self.index_sum(s);
                }
                trow.copy_from_slice(&best);
            });
            targets[k] = tgt;
            next = cur;
        }
        (next[0], targets)
    }

    /// For each state the reachable admissible state with the largest
    /// continuation; staying put is always allowed. Ties keep the
    /// smaller investment.
    fn best_targets(&self, c: &[f64], adm: &[bool], best: &mut [u32]) {
        let m = self.grid.levels;
        if self.grid.n_firms() == 1 {
            let mut run: Option<usize> = None;
            for s in (0..m).rev() {
                if adm[s] {
                    run = Some(match run {
                        Some(r) if c[r] > c[s] => r,
                        _ => s,
                    });
                }
                best[s] = run.unwrap_or(s) as u32;
                if !adm[s] {
                    best[s] = s as u32;
                }
            }
        } else {
            let mut sup = vec![usize::MAX; m * m];
            for a in (0..m).rev() {
                for b in (0..m).rev() {
                    let s = a * m + b;
                    if !adm[s] {
                        best[s] = s as u32;
                        continue;
                    }
                    let mut r = s;
                    for nb in [if a + 1 < m { Some((a + 1) * m + b) } else { None }, if b + 1 < m { Some(s + 1) } else { None }]
                        .into_iter()
                        .flatten()
                    {
                        if adm[nb] && c[sup[nb]] > c[r] {
                            r = sup[nb];
                        }
                    }
                    sup[s] = r;
                    best[s] = r as u32;
                }
            }
        }
    }

    fn natural(&self, v: f64) -> f64 {
        if self.quadratic() {
            -v
        } else {
            v
        }
    }
}

/// Solves the quantized problem by backward induction over
/// `(step, node, per-firm level index)`.
pub fn dp_solve(
    lattice: &Lattice,
    fuel: &FuelModel,
    profits: &[ProfitModel],
    y: &[f64],
    delta: f64,
    cfg: &DpConfig,
) -> Result<DpSolution> {
    let problem = Problem::new(lattice, fuel, profits, delta, y, cfg.fuel_levels)?;
    let required = problem.required_bytes();
    if required > cfg.memory_budget_bytes {
        return Err(FuelError::BudgetExceeded { required_bytes: required, budget_bytes: cfg.memory_budget_bytes });
    }
    let (value, targets) = problem.induct(None);
    Ok(DpSolution {
        value: problem.natural(value),
        orientation: profits[0].orientation(),
        policy: PolicyTable { fuel: problem.grid.clone(), targets },
    })
}

/// Exact lattice value of a fixed Markov policy `(step, node, levels) ->
/// target levels` (clamped to be monotone and admissible).
pub fn evaluate_on_lattice(
    lattice: &Lattice,
    fuel: &FuelModel,
    profits: &[ProfitModel],
    y: &[f64],
    delta: f64,
    cfg: &DpConfig,
    policy: &(dyn Fn(usize, usize, &[usize]) -> Vec<usize> + Sync),
) -> Result<f64> {
    let problem = Problem::new(lattice, fuel, profits, delta, y, cfg.fuel_levels)?;
    Ok(problem.natural(problem.induct(Some(policy)).0))
}

/// The closed-form policy of `dynamics` on the lattice, projected down onto
/// the fuel grid: `nu_{k+1} = max(nu_k, floor(l(x_k) ∧ cap theta_k))`.
pub fn closed_form_lattice_policy<'a>(
    dynamics: &'a Dynamics,
    lattice: &'a Lattice,
    fuel: &'a FuelGrid,
) -> impl Fn(usize, usize, &[usize]) -> Vec<usize> + Sync + 'a {
    move |k, j, from| {
        let g = lattice.model.to_gaussian(lattice.value(k, j));
        let theta = dynamics.theta(lattice.grid.time(k));
        let target: Vec<f64> = (0..from.len())
            .map(|i| dynamics.base_at(i, g).min(dynamics.caps()[i] * theta))
            .collect();
        projected(dynamics, fuel, from, &target, theta)
    }
}

fn projected(dynamics: &Dynamics, fuel: &FuelGrid, from: &[usize], base: &[f64], theta: f64) -> Vec<usize> {
    let levels: Vec<f64> = (0..from.len()).map(|i| fuel.level(i, from[i]).max(base[i])).collect();
    let mut nu = vec![0.0; from.len()];
    dynamics.plan_from_levels(&levels, theta, &mut nu);
    (0..from.len()).map(|i| fuel.floor_index(i, nu[i]).max(from[i])).collect()
}

/// Node-monitored closed-form plan on `shock`, floored onto `fuel`.
pub fn projected_plan(dynamics: &Dynamics, shock: &PathEnsemble, fuel: &FuelGrid) -> Result<InvestmentPlan> {
    let grid = shock.grid();
    let theta = PathEnsemble::deterministic(grid, shock.n_paths(), |t| dynamics.theta(t))?;
    let bases: Vec<PathEnsemble> = (0..dynamics.n_firms())
        .map(|i| shock.map(|x| dynamics.base_at(i, dynamics.shock.to_gaussian(x))))
        .collect();
    let levels = nfirm_policy(&bases, &dynamics.weights, &theta, &dynamics.y())?;
    let mut plan = match dynamics.modifier {
        PlanModifier::Frozen => InvestmentPlan::frozen(grid, shock.n_paths(), &dynamics.y())?,
        _ => levels.clone(),
    };
    let n_firms = dynamics.n_firms();
    let mut r = vec![0.0; n_firms];
    let mut nu = vec![0.0; n_firms];
    for p in 0..shock.n_paths() {
        for k in 0..grid.n_nodes() {
            for (i, ri) in r.iter_mut().enumerate() {
                *ri = levels.firm(i).get(p, k);
            }
            if !matches!(dynamics.modifier, PlanModifier::Frozen) {
                dynamics.plan_from_levels(&r, theta.get(p, k), &mut nu);
            } else {
                nu.copy_from_slice(&dynamics.y());
            }
            for i in 0..n_firms {
                plan.firm_mut(i).path_mut(p)[k] = fuel.level(i, fuel.floor_index(i, nu[i]));
            }
        }
    }
    Ok(plan)
}

/// Knobs of [`oracle_gap`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleConfig {
    pub fuel_levels: usize,
    pub n_paths: usize,
    pub seed: u64,
    /// Relative tolerance on the gap.
    pub rel_tol: f64,
    pub memory_budget_bytes: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig { fuel_levels: 101, n_paths: 4096, seed: 1, rel_tol: 0.01, memory_budget_bytes: 2 << 30 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleGap {
    pub dp_value: f64,
    pub policy_value: Estimate,
    /// `dp_value - policy_value` oriented so that the DP side is the better one.
    pub gap: f64,
    pub pass: bool,
}

/// Compares the DP optimum with the Monte Carlo value of the closed-form
/// policy on the same grid. Passes iff `-3 SE <= gap <= max(rel_tol |dp|, 3 SE)`.
pub fn oracle_gap(dynamics: &Dynamics, grid: &TimeGrid, cfg: &OracleConfig) -> Result<OracleGap> {
    ensure(cfg.n_paths >= 2, || "need at least two paths".to_string())?;
    ensure(cfg.rel_tol >= 0.0, || format!("rel_tol must be >= 0, got {}", cfg.rel_tol))?;
    let lattice = build_lattice(&dynamics.shock, grid)?;
    let profits: Vec<ProfitModel> = dynamics.firms.iter().map(|f| f.profit).collect();
    let y = dynamics.y();
    let dp_cfg = DpConfig { fuel_levels: cfg.fuel_levels, memory_budget_bytes: cfg.memory_budget_bytes };
    let solution = dp_solve(&lattice, &dynamics.fuel, &profits, &y, dynamics.delta, &dp_cfg)?;
    let fuel = solution.policy.fuel_grid().clone();

    let shock = simulate_shock(&dynamics.shock, grid, cfg.n_paths, cfg.seed)?;
    let plan = projected_plan(dynamics, &shock, &fuel)?;
    let samples: Vec<f64> = if dynamics.is_quadratic() {
        tracking_cost_paths(&plan, &shock, dynamics.delta, dynamics.shock.sigma(), true)?.0
    } else {
        let (per_firm, _) = net_profit_paths(&plan, &shock, &profits, dynamics.delta, &dynamics.shock, true)?;
        (0..cfg.n_paths).map(|p| per_firm.iter().map(|f| f[p]).sum()).collect()
    };
    let policy_value = Estimate::from_samples(&samples, 0.0);
    let gap = dynamics.orientation().sign() * (solution.value - policy_value.mean);
    let se = policy_value.std_error;
    let pass = gap >= -3.0 * se && gap <= (cfg.rel_tol * solution.value.abs()).max(3.0 * se);
    Ok(OracleGap { dp_value: solution.value, policy_value, gap, pass })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::base_capacity::{cobb_douglas_k, BaseCapacitySpec};
    use crate::eval::FirmSpec;
    use crate::paths::make_grid;
    use approx::assert_relative_eq;

    fn cobb_profits(n: usize) -> Vec<ProfitModel> {
        vec![ProfitModel::CobbDouglas { alpha: 0.5 }; n]
    }

    #[test]
    fn lattice_examples() {
        let grid = make_grid(1.0, 100).unwrap();
        let model = ShockModel::GeometricBrownian { x0: 1.0, mu: 0.05, sigma: 0.3 };
        let lat = build_lattice(&model, &grid).unwrap();
        let (u, d) = (0.03f64.exp(), (-0.03f64).exp());
        assert_relative_eq!(lat.p(), ((0.0005f64).exp() - d) / (u - d), max_relative = 1e-12);
        assert_relative_eq!(lat.value(1, 1), u, max_relative = 1e-12);
        assert_relative_eq!(lat.value(1, 0), d, max_relative = 1e-12);
        assert_eq!(lat.n_nodes(7), 8);
        let mean = lat.mean(100);
        assert!((mean / (0.05f64).exp() - 1.0).abs() <= 1e-3);
    }

    #[test]
    fn lattice_mean_matches_drift_over_long_horizon() {
        let grid = make_grid(5.0, 200).unwrap();
        let model = ShockModel::GeometricBrownian { x0: 2.0, mu: -0.1, sigma: 0.4 };
        let lat = build_lattice(&model, &grid).unwrap();
        assert_relative_eq!(lat.mean(200), 2.0 * (-0.5f64).exp(), max_relative = 1e-10);
    }

    #[test]
    fn unstable_lattice_is_rejected() {
        let grid = make_grid(10.0, 2).unwrap();
        let model = ShockModel::GeometricBrownian { x0: 1.0, mu: 2.0, sigma: 0.1 };
        assert!(matches!(build_lattice(&model, &grid), Err(FuelError::UnstableDiscretization { .. })));
    }

    #[test]
    fn idle_tracking_is_free() {
        let grid = make_grid(5.0, 50).unwrap();
        let lat = build_lattice(&ShockModel::ArithmeticBrownian { w0: 0.0, sigma: 0.0 }, &grid).unwrap();
        let sol = dp_solve(
            &lat,
            &FuelModel::Constant { theta0: 1.0 },
            &[ProfitModel::QuadraticTracking],
            &[0.0],
            1.0,
            &DpConfig { fuel_levels: 21, ..Default::default() },
        )
        .unwrap();
        assert_eq!(sol.value, 0.0);
        assert_eq!(sol.policy.target(0, 0, &[0]), vec![0]);
    }

    #[test]
    fn deterministic_jump_matches_calculus() {
        // sigma = 0: revenue 2 sqrt(v) / D - v peaks at v = 1 (D = 1).
        let grid = make_grid(10.0, 1000).unwrap();
        let lat = build_lattice(&ShockModel::GeometricBrownian { x0: 1.0, mu: 0.0, sigma: 0.0 }, &grid).unwrap();
        let sol = dp_solve(
            &lat,
            &FuelModel::Constant { theta0: 4.0 },
            &cobb_profits(1),
            &[0.01],
            1.0,
            &DpConfig { fuel_levels: 101, ..Default::default() },
        )
        .unwrap();
        let fuel = sol.policy.fuel_grid();
        let chosen = fuel.level(0, sol.policy.target(0, 0, &[0])[0]);
        assert!((chosen - 1.0).abs() <= fuel.step, "chosen {chosen}, step {}", fuel.step);
    }

    #[test]
    fn budget_is_enforced() {
        let grid = make_grid(1.0, 100).unwrap();
        let lat = build_lattice(&ShockModel::GeometricBrownian { x0: 1.0, mu: 0.0, sigma: 0.3 }, &grid).unwrap();
        let err = dp_solve(
            &lat,
            &FuelModel::Constant { theta0: 2.0 },
            &cobb_profits(2),
            &[0.1, 0.1],
            1.0,
            &DpConfig { fuel_levels: 41, memory_budget_bytes: 1 << 20 },
        )
        .unwrap_err();
        match err {
            FuelError::BudgetExceeded { required_bytes, .. } => assert!(required_bytes > 1 << 20),
            e => panic!("{e:?}"),
        }
    }

    fn desk(theta0: f64, ys: &[f64]) -> Dynamics {
        let k = cobb_douglas_k(0.5, -0.045, 0.3, 1.0).unwrap();
        let firms = ys
            .iter()
            .map(|&y| FirmSpec { profit: ProfitModel::CobbDouglas { alpha: 0.5 }, base: BaseCapacitySpec::ScaledShock { k }, y: y * k })
            .collect();
        Dynamics::new(
            ShockModel::GeometricBrownian { x0: 1.0, mu: 0.0, sigma: 0.3 },
            FuelModel::Constant { theta0: theta0 * k },
            firms,
            1.0,
        )
        .unwrap()
    }

    #[test]
    fn dp_dominates_quantized_policies_on_the_lattice() {
        let d = desk(2.0, &[0.25]);
        let grid = make_grid(8.0, 80).unwrap();
        let lat = build_lattice(&d.shock, &grid).unwrap();
        let cfg = DpConfig { fuel_levels: 41, ..Default::default() };
        let profits = cobb_profits(1);
        let sol = dp_solve(&lat, &d.fuel, &profits, &d.y(), 1.0, &cfg).unwrap();
        let fuel = sol.policy.fuel_grid().clone();
        let closed = closed_form_lattice_policy(&d, &lat, &fuel);
        let v = evaluate_on_lattice(&lat, &d.fuel, &profits, &d.y(), 1.0, &cfg, &closed).unwrap();
        assert!(sol.value >= v - 1e-12 * v.abs());
        assert!((sol.value - v) / sol.value < 0.01, "{} vs {v}", sol.value);
        for factor in [0.5, 0.8, 1.25, 2.0] {
            let other = d.clone().with_modifier(PlanModifier::ScaledBase { factor }).unwrap();
            let policy = closed_form_lattice_policy(&other, &lat, &fuel);
            let w = evaluate_on_lattice(&lat, &d.fuel, &profits, &d.y(), 1.0, &cfg, &policy).unwrap();
            assert!(sol.value >= w - 1e-12 * w.abs(), "factor {factor}: {w} > {}", sol.value);
        }
        // Replaying the optimal table recovers the optimum.
        let table = sol.policy.clone();
        let replay = move |k: usize, j: usize, s: &[usize]| table.target(k, j, s);
        let r = evaluate_on_lattice(&lat, &d.fuel, &profits, &d.y(), 1.0, &cfg, &replay).unwrap();
        assert_relative_eq!(r, sol.value, max_relative = 1e-12);
    }

    #[test]
    fn finer_fuel_grid_never_loses_value() {
        let d = desk(2.0, &[0.25]);
        let grid = make_grid(8.0, 80).unwrap();
        let lat = build_lattice(&d.shock, &grid).unwrap();
        let solve = |m| dp_solve(&lat, &d.fuel, &cobb_profits(1), &d.y(), 1.0, &DpConfig { fuel_levels: m, ..Default::default() }).unwrap();
        let (coarse, fine) = (solve(21), solve(41));
        assert!(fine.value >= coarse.value - 1e-12);
    }

    #[test]
    fn symmetric_firms_get_symmetric_policies() {
        let d = desk(3.0, &[0.3, 0.3]);
        let grid = make_grid(4.0, 40).unwrap();
        let lat = build_lattice(&d.shock, &grid).unwrap();
        let sol = dp_solve(&lat, &d.fuel, &cobb_profits(2), &d.y(), 1.0, &DpConfig { fuel_levels: 21, ..Default::default() })
            .unwrap();
        for k in [0, 5, 20, 39] {
            for j in 0..=k {
                for a in 0..21 {
                    for b in 0..21 - a {
                        let t = sol.policy.target(k, j, &[a, b]);
                        let u = sol.policy.target(k, j, &[b, a]);
                        assert!(t[0].abs_diff(u[1]) <= 1 && t[1].abs_diff(u[0]) <= 1, "k={k} j={j} ({a},{b})");
                    }
                }
            }
        }
    }

    #[test]
    fn never_investing_is_caught_by_the_gap() {
        let d = desk(100.0, &[0.25]).with_modifier(PlanModifier::Frozen).unwrap();
        let grid = make_grid(8.0, 80).unwrap();
        let cfg = OracleConfig { fuel_levels: 201, n_paths: 1024, ..Default::default() };
        let gap = oracle_gap(&d, &grid, &cfg).unwrap();
        assert!(!gap.pass && gap.gap > 3.0 * gap.policy_value.std_error, "{gap:?}");
    }

    #[test]
    fn policy_csv_lists_visited_states() {
        let d = desk(2.0, &[0.25]);
        let grid = make_grid(2.0, 10).unwrap();
        let lat = build_lattice(&d.shock, &grid).unwrap();
        let sol = dp_solve(&lat, &d.fuel, &cobb_profits(1), &d.y(), 1.0, &DpConfig { fuel_levels: 11, ..Default::default() }).unwrap();
        let mut buf = Vec::new();
        sol.policy.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("step,node,state_0,increment_0"));
        let first: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(&first[..3], &["0", "0", "0"]);
        assert!(first[3].parse::<f64>().unwrap() > 0.0);
    }
}
