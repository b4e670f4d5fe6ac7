//! Monte Carlo functionals of investment plans, the supergradient and
//! Snell envelope at the optimum, multiplier densities and Kuhn-Tucker
//! reports.

mod dynamics;
mod kkt;

pub use dynamics::{Dynamics, FirmSpec, MarkovState, PlanModifier};
pub use kkt::{
    build_plan, kkt_report, lagrange_density, snell_at_optimum, supergradient, ConditionResult, KktConfig,
    KktReport, MultiplierDensity, OuterPaths, PlannedPaths, SnellCase,
};

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{ensure, invalid, Result};
use crate::estimate::Estimate;
use crate::paths::{PathEnsemble, ShockModel};
use crate::policy::InvestmentPlan;
use crate::profit::{power_moment_rate, Orientation, ProfitModel};

/// Expected discounted profit net of investment, per firm and in total.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NetProfit {
    pub per_firm: Vec<Estimate>,
    pub aggregate: Estimate,
}

fn firm_profit<'a>(profits: &'a [ProfitModel], i: usize) -> &'a ProfitModel {
    if profits.len() == 1 {
        &profits[0]
    } else {
        &profits[i]
    }
}

/// Per-path net profit of each firm. With `with_tail` the plan is frozen at
/// its horizon level and the remaining profit is added in closed form;
/// otherwise that amount is returned separately as the tail.
pub fn net_profit_paths(
    plan: &InvestmentPlan,
    shock: &PathEnsemble,
    profits: &[ProfitModel],
    delta: f64,
    model: &ShockModel,
    with_tail: bool,
) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    ensure(plan.firm(0).same_shape(shock), || "plan and shock ensembles differ in shape".to_string())?;
    ensure(profits.len() == 1 || profits.len() == plan.n_firms(), || {
        format!("{} profit models for {} firms", profits.len(), plan.n_firms())
    })?;
    ensure(delta > 0.0, || format!("delta must be > 0, got {delta}"))?;
    for p in profits {
        p.validate()?;
        if p.orientation() != Orientation::Maximize {
            return Err(invalid("net profit needs a profit (maximization) model"));
        }
    }
    let (mu, sigma) = match *model {
        ShockModel::GeometricBrownian { mu, sigma, .. } => (mu, sigma),
        ShockModel::ArithmeticBrownian { .. } => return Err(invalid("net profit needs a geometric shock")),
    };
    let grid = plan.grid();
    let n = grid.n_steps();
    let dt = grid.dt();
    let disc: Vec<f64> = grid.nodes().iter().map(|t| (-delta * t).exp()).collect();
    let n_firms = plan.n_firms();
    let rows: Vec<(Vec<f64>, f64)> = (0..plan.n_paths())
        .into_par_iter()
        .map(|p| {
            let x = shock.path(p);
            let mut values = vec![0.0; n_firms];
            let mut tail_total = 0.0;
            for (i, v) in values.iter_mut().enumerate() {
                let model = firm_profit(profits, i);
                let nu = plan.firm(i).path(p);
                let mut revenue = 0.0;
                let mut cost = 0.0;
                for k in 0..n {
                    revenue += disc[k] * model.value_unchecked(x[k], nu[k]);
                    cost += disc[k] * (nu[k + 1] - nu[k]);
                }
                let tail = match *model {
                    ProfitModel::CobbDouglas { alpha } => {
                        disc[n] * model.value_unchecked(x[n], nu[n]) / power_moment_rate(alpha, mu, sigma, delta)
                    }
                    ProfitModel::QuadraticTracking => 0.0,
                };
                *v = revenue * dt - cost + if with_tail { tail } else { 0.0 };
                tail_total += tail;
            }
            (values, tail_total)
        })
        .collect();
    let mut per_firm = vec![Vec::with_capacity(rows.len()); n_firms];
    let mut tails = Vec::with_capacity(rows.len());
    for (values, tail) in rows {
        for (i, v) in values.into_iter().enumerate() {
            per_firm[i].push(v);
        }
        tails.push(tail);
    }
    Ok((per_firm, tails))
}

/// `E[ sum_k e^{-delta t_k} R(X_k, nu_k) dt - sum_k e^{-delta t_k} (nu_{k+1} - nu_k) ]`
/// on the grid, with the frozen-plan continuation beyond the horizon
/// reported as the tail bound.
pub fn net_profit(
    plan: &InvestmentPlan,
    shock: &PathEnsemble,
    profits: &[ProfitModel],
    delta: f64,
    model: &ShockModel,
) -> Result<NetProfit> {
    let (per_firm, tails) = net_profit_paths(plan, shock, profits, delta, model, false)?;
    let tail = tails.iter().sum::<f64>() / tails.len() as f64;
    let aggregate: Vec<f64> = (0..tails.len()).map(|p| per_firm.iter().map(|f| f[p]).sum()).collect();
    Ok(NetProfit {
        per_firm: per_firm.iter().map(|f| Estimate::from_samples(f, tail)).collect(),
        aggregate: Estimate::from_samples(&aggregate, tail),
    })
}

/// Per-path `sum_k delta e^{-delta t_k} (W_k - nu_k)^2 / 2 dt`, plus the
/// frozen-plan tail `e^{-delta T}[(W_T - nu_T)^2 / 2 + sigma^2 / (2 delta)]`
/// when `with_tail` is set.
pub fn tracking_cost_paths(plan: &InvestmentPlan, w: &PathEnsemble, delta: f64, sigma: f64, with_tail: bool) -> Result<(Vec<f64>, Vec<f64>)> {
    ensure(plan.n_firms() == 1, || "tracking cost is single-firm".to_string())?;
    ensure(plan.firm(0).same_shape(w), || "plan and shock ensembles differ in shape".to_string())?;
    ensure(delta > 0.0, || format!("delta must be > 0, got {delta}"))?;
    let grid = plan.grid();
    let n = grid.n_steps();
    let dt = grid.dt();
    let disc: Vec<f64> = grid.nodes().iter().map(|t| delta * (-delta * t).exp()).collect();
    let rows: Vec<(f64, f64)> = (0..plan.n_paths())
        .into_par_iter()
        .map(|p| {
            let (wp, nu) = (w.path(p), plan.firm(0).path(p));
            let cost: f64 = (0..n).map(|k| disc[k] * 0.5 * (wp[k] - nu[k]).powi(2)).sum::<f64>() * dt;
            let tail = disc[n] / delta * (0.5 * (wp[n] - nu[n]).powi(2) + 0.5 * sigma * sigma / delta);
            (cost + if with_tail { tail } else { 0.0 }, tail)
        })
        .collect();
    Ok(rows.into_iter().unzip())
}

/// `E int delta e^{-delta s} (W - nu)^2 / 2 ds` on the grid (left Riemann).
pub fn tracking_cost(plan: &InvestmentPlan, w: &PathEnsemble, delta: f64) -> Result<Estimate> {
    let (values, tails) = tracking_cost_paths(plan, w, delta, 1.0, false)?;
    let tail = tails.iter().sum::<f64>() / tails.len() as f64;
    Ok(Estimate::from_samples(&values, tail))
}
