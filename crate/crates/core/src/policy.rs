//! Running-supremum investment policies and their admissibility checks.
//!
//! Plans are left-continuous: the value stored at node `k` is the level in
//! force just before `t_k`, built from inputs at nodes `0..k-1`. A jump
//! decided at `t_k` therefore first shows up at node `k + 1`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, invalid, FuelError, Result};
use crate::paths::{PathEnsemble, TimeGrid};

/// Cumulative investment of every firm on every path.
#[derive(Debug, Clone, PartialEq)]
pub struct InvestmentPlan {
    y: Vec<f64>,
    firms: Vec<PathEnsemble>,
}

impl InvestmentPlan {
    pub fn new(y: Vec<f64>, firms: Vec<PathEnsemble>) -> Result<Self> {
        ensure(!firms.is_empty() && firms.len() == y.len(), || {
            format!("need one initial level per firm, got {} levels for {} firms", y.len(), firms.len())
        })?;
        ensure(firms.iter().all(|f| f.same_shape(&firms[0])), || {
            "firm ensembles must share grid and path count".to_string()
        })?;
        Ok(InvestmentPlan { y, firms })
    }

    /// Plan that never invests.
    pub fn frozen(grid: &TimeGrid, n_paths: usize, y: &[f64]) -> Result<Self> {
        let firms = y
            .iter()
            .map(|&yi| PathEnsemble::deterministic(grid, n_paths, |_| yi))
            .collect::<Result<Vec<_>>>()?;
        Self::new(y.to_vec(), firms)
    }

    pub fn n_firms(&self) -> usize {
        self.firms.len()
    }

    pub fn n_paths(&self) -> usize {
        self.firms[0].n_paths()
    }

    pub fn grid(&self) -> &TimeGrid {
        self.firms[0].grid()
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn firm(&self, i: usize) -> &PathEnsemble {
        &self.firms[i]
    }

    pub fn firm_mut(&mut self, i: usize) -> &mut PathEnsemble {
        &mut self.firms[i]
    }

    pub fn firms(&self) -> &[PathEnsemble] {
        &self.firms
    }

    /// `sum_i nu_i` at one path and node, summed in firm order.
    pub fn aggregate(&self, path: usize, node: usize) -> f64 {
        self.firms.iter().map(|f| f.get(path, node)).sum()
    }
}

/// Constant shares `beta_i = k_i / sum_j k_j` of the common fuel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationWeights {
    beta: Vec<f64>,
}

impl AllocationWeights {
    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    /// Shares scaled down so that rounding can never push the sum of the
    /// per-firm caps above the fuel level.
    pub fn cap_factors(&self) -> Vec<f64> {
        let n = self.beta.len();
        if n == 1 {
            return vec![1.0];
        }
        let shrink = 1.0 - 4.0 * n as f64 * f64::EPSILON;
        self.beta.iter().map(|b| b * shrink).collect()
    }
}

pub fn allocation_weights(k: &[f64]) -> Result<AllocationWeights> {
    ensure(!k.is_empty(), || "need at least one firm".to_string())?;
    for (i, &ki) in k.iter().enumerate() {
        ensure(ki.is_finite() && ki > 0.0, || format!("k[{i}] must be > 0, got {ki}"))?;
    }
    let total: f64 = k.iter().sum();
    Ok(AllocationWeights { beta: k.iter().map(|ki| ki / total).collect() })
}

/// `nu(t_k) = max(y, max_{j<k} min(l_j, theta_j))`.
pub fn running_sup_policy(l: &PathEnsemble, theta: &PathEnsemble, y: f64) -> Result<InvestmentPlan> {
    ensure(l.same_shape(theta), || "base capacity and fuel ensembles differ in shape".to_string())?;
    ensure(y > 0.0, || format!("initial capacity must be > 0, got {y}"))?;
    if y >= theta.get(0, 0) {
        return Err(FuelError::InfeasibleInitialization(format!(
            "initial capacity {y} must be below theta0 = {}",
            theta.get(0, 0)
        )));
    }
    let plan = capped_running_sup(l, theta, 1.0, y);
    InvestmentPlan::new(vec![y], vec![plan])
}

fn capped_running_sup(l: &PathEnsemble, theta: &PathEnsemble, share: f64, y: f64) -> PathEnsemble {
    let mut out = l.clone();
    let n = l.grid().n_nodes();
    out.values_mut().par_chunks_mut(n).enumerate().for_each(|(p, row)| {
        let lp = l.path(p);
        let tp = theta.path(p);
        let mut level = y;
        row[0] = y;
        for k in 1..n {
            level = level.max(lp[k - 1].min(share * tp[k - 1]));
            row[k] = level;
        }
    });
    out
}

/// Per-firm running suprema of `l_i ∧ beta_i theta`, floored at `y_i`.
///
/// Besides `sum y_i < theta0` this requires `y_i <= beta_i theta0`: a firm
/// starting above its share would keep its initial level while the others
/// fill theirs, and the aggregate could exceed the fuel.
pub fn nfirm_policy(
    l: &[PathEnsemble],
    beta: &AllocationWeights,
    theta: &PathEnsemble,
    y: &[f64],
) -> Result<InvestmentPlan> {
    let n = l.len();
    ensure(n >= 1 && beta.len() == n && y.len() == n, || {
        format!("{} base capacities, {} weights, {} initial levels", n, beta.len(), y.len())
    })?;
    for li in l {
        ensure(li.same_shape(theta), || "base capacity and fuel ensembles differ in shape".to_string())?;
    }
    for (i, &yi) in y.iter().enumerate() {
        ensure(yi > 0.0, || format!("y[{i}] must be > 0, got {yi}"))?;
    }
    let caps = beta.cap_factors();
    let sum_y: f64 = y.iter().sum();
    for p in 0..theta.n_paths() {
        let theta0 = theta.get(p, 0);
        if sum_y >= theta0 {
            return Err(FuelError::InfeasibleInitialization(format!(
                "sum of initial capacities {sum_y} must be below theta0 = {theta0}"
            )));
        }
        if n > 1 {
            for (i, (&yi, &c)) in y.iter().zip(&caps).enumerate() {
                if yi > c * theta0 {
                    return Err(FuelError::InfeasibleInitialization(format!(
                        "y[{i}] = {yi} exceeds its fuel share {}",
                        c * theta0
                    )));
                }
            }
        }
    }
    let firms = l
        .iter()
        .zip(&caps)
        .zip(y)
        .map(|((li, &c), &yi)| capped_running_sup(li, theta, c, yi))
        .collect();
    InvestmentPlan::new(y.to_vec(), firms)
}

/// Violations found by [`admissibility_report`]. Node indices refer to the
/// plan grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdmissibilityReport {
    /// `max_k (sum_i nu_i(t_k) - theta(t_k))^+` per path.
    pub max_excess: Vec<f64>,
    /// `(path, node, excess)` for every node over the fuel.
    pub excess_nodes: Vec<(usize, usize, f64)>,
    /// `(firm, path, node)` where `nu(t_node) < nu(t_{node-1})`.
    pub monotonicity_violations: Vec<(usize, usize, usize)>,
    /// `(firm, path)` whose node-0 value differs from `y_i`.
    pub initial_mismatches: Vec<(usize, usize)>,
}

impl AdmissibilityReport {
    pub fn admissible(&self) -> bool {
        self.excess_nodes.is_empty() && self.monotonicity_violations.is_empty() && self.initial_mismatches.is_empty()
    }
}

pub fn admissibility_report(plan: &InvestmentPlan, theta: &PathEnsemble) -> Result<AdmissibilityReport> {
    ensure(plan.firm(0).same_shape(theta), || "plan and fuel ensembles differ in shape".to_string())?;
    let n_nodes = plan.grid().n_nodes();
    let mut report = AdmissibilityReport {
        max_excess: vec![0.0; plan.n_paths()],
        excess_nodes: Vec::new(),
        monotonicity_violations: Vec::new(),
        initial_mismatches: Vec::new(),
    };
    for p in 0..plan.n_paths() {
        for k in 0..n_nodes {
            let excess = plan.aggregate(p, k) - theta.get(p, k);
            if excess > 0.0 {
                report.excess_nodes.push((p, k, excess));
                report.max_excess[p] = report.max_excess[p].max(excess);
            }
        }
    }
    for (i, firm) in plan.firms().iter().enumerate() {
        for (p, row) in firm.paths().enumerate() {
            if row[0] != plan.y()[i] {
                report.initial_mismatches.push((i, p));
            }
            for k in 1..n_nodes {
                if row[k] < row[k - 1] {
                    report.monotonicity_violations.push((i, p, k));
                }
            }
        }
    }
    Ok(report)
}

/// First-passage node indices from a starting node; `None` means the
/// crossing did not happen on the grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HittingTimes {
    pub from_index: usize,
    /// First `k >= from` with `l_agg(t_k) > theta(t_{k+1})`.
    pub aggregate: Vec<Option<usize>>,
    /// First `k >= from` with `l_i(t_k) > beta_i theta(t_{k+1})` for every `i`.
    pub per_firm: Option<Vec<Option<usize>>>,
    /// Paths whose aggregate crossing sits at the last node, where the
    /// right limit of the fuel is not observed.
    pub censored: Vec<bool>,
    /// Paths on which the two times differ.
    pub disagreements: Vec<usize>,
}

impl HittingTimes {
    /// Grid time of a hit, or `None`.
    pub fn time(&self, grid: &TimeGrid, path: usize) -> Option<f64> {
        self.aggregate[path].map(|k| grid.time(k))
    }
}

pub fn hitting_times(
    l_agg: &PathEnsemble,
    theta: &PathEnsemble,
    from: f64,
    weights: Option<&AllocationWeights>,
    l_each: Option<&[PathEnsemble]>,
) -> Result<HittingTimes> {
    ensure(l_agg.same_shape(theta), || "base capacity and fuel ensembles differ in shape".to_string())?;
    let grid = theta.grid();
    let from_index = grid
        .node_index(from)
        .ok_or_else(|| invalid(format!("from = {from} is not a grid node")))?;
    let n = grid.n_steps();
    let plus = |k: usize| (k + 1).min(n);

    let aggregate: Vec<Option<usize>> = (0..theta.n_paths())
        .map(|p| {
            let (lp, tp) = (l_agg.path(p), theta.path(p));
            (from_index..=n).find(|&k| lp[k] > tp[plus(k)])
        })
        .collect();
    let censored = aggregate.iter().map(|h| *h == Some(n)).collect();

    let per_firm = match (weights, l_each) {
        (Some(w), Some(each)) => {
            ensure(w.len() == each.len(), || "weights and base capacities differ in length".to_string())?;
            for li in each {
                ensure(li.same_shape(theta), || "base capacity and fuel ensembles differ in shape".to_string())?;
            }
            Some(
                (0..theta.n_paths())
                    .map(|p| {
                        let tp = theta.path(p);
                        (from_index..=n).find(|&k| {
                            each.iter().zip(w.beta()).all(|(li, b)| li.get(p, k) > b * tp[plus(k)])
                        })
                    })
                    .collect::<Vec<_>>(),
            )
        }
        (None, None) => None,
        _ => return Err(invalid("per-firm hitting times need both weights and base capacities")),
    };
    let disagreements = match &per_firm {
        Some(pf) => (0..aggregate.len()).filter(|&p| pf[p] != aggregate[p]).collect(),
        None => Vec::new(),
    };
    Ok(HittingTimes { from_index, aggregate, per_firm, censored, disagreements })
}

/// Nodes `k` where the plan of `firm` increases between `t_k` and `t_{k+1}`.
pub fn increase_nodes(plan: &InvestmentPlan, firm: usize, path: usize) -> Vec<usize> {
    let row = plan.firm(firm).path(path);
    (0..row.len() - 1).filter(|&k| row[k + 1] > row[k]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::paths::make_grid;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn constant(grid: &TimeGrid, n_paths: usize, v: f64) -> PathEnsemble {
        PathEnsemble::deterministic(grid, n_paths, |_| v).unwrap()
    }

    #[test]
    fn running_sup_examples() {
        let g = make_grid(1.0, 4).unwrap();
        let plan = running_sup_policy(&constant(&g, 2, 2.0), &constant(&g, 2, 5.0), 1.0).unwrap();
        for row in plan.firm(0).paths() {
            assert_eq!(row, &[1.0, 2.0, 2.0, 2.0, 2.0]);
        }
        let plan = running_sup_policy(&constant(&g, 1, 10.0), &constant(&g, 1, 5.0), 1.0).unwrap();
        assert_eq!(plan.firm(0).path(0), &[1.0, 5.0, 5.0, 5.0, 5.0]);
        let plan = running_sup_policy(&constant(&g, 1, 0.5), &constant(&g, 1, 5.0), 1.0).unwrap();
        assert_eq!(plan.firm(0).path(0), &[1.0; 5]);
        assert!(matches!(
            running_sup_policy(&constant(&g, 1, 0.5), &constant(&g, 1, 1.0), 1.0),
            Err(FuelError::InfeasibleInitialization(_))
        ));
    }

    #[test]
    fn weights_examples() {
        let w = allocation_weights(&[2.0, 2.0]).unwrap();
        assert_eq!(w.beta(), &[0.5, 0.5]);
        let w = allocation_weights(&[1.0, 3.0]).unwrap();
        assert_eq!(w.beta(), &[0.25, 0.75]);
        let w = allocation_weights(&[4.0 / 9.0, 0.64]).unwrap();
        assert_relative_eq!(w.beta()[0], 0.409836, epsilon = 1e-6);
        assert_relative_eq!(w.beta()[1], 0.590164, epsilon = 1e-6);
        assert!(allocation_weights(&[1.0, 0.0]).is_err());
    }

    #[test]
    fn nfirm_examples() {
        let g = make_grid(1.0, 4).unwrap();
        let l = vec![constant(&g, 1, 10.0), constant(&g, 1, 10.0)];
        let w = allocation_weights(&[1.0, 1.0]).unwrap();
        let plan = nfirm_policy(&l, &w, &constant(&g, 1, 5.0), &[1.0, 1.0]).unwrap();
        for i in 0..2 {
            let row = plan.firm(i).path(0);
            assert_eq!(row[0], 1.0);
            for &v in &row[1..] {
                assert_relative_eq!(v, 2.5, max_relative = 1e-14);
                assert!(v <= 2.5);
            }
        }
        let one = nfirm_policy(&l[..1], &allocation_weights(&[3.0]).unwrap(), &constant(&g, 1, 5.0), &[1.0]).unwrap();
        let single = running_sup_policy(&l[0], &constant(&g, 1, 5.0), 1.0).unwrap();
        assert_eq!(one, single);
        assert!(matches!(
            nfirm_policy(&l, &w, &constant(&g, 1, 2.0), &[1.0, 1.0]),
            Err(FuelError::InfeasibleInitialization(_))
        ));
        // Total below theta0 but firm 0 above its share.
        assert!(matches!(
            nfirm_policy(&l, &w, &constant(&g, 1, 5.0), &[3.0, 0.5]),
            Err(FuelError::InfeasibleInitialization(_))
        ));
    }

    #[test]
    fn admissibility_faults_are_flagged() {
        let g = make_grid(1.0, 4).unwrap();
        let theta = constant(&g, 1, 5.0);
        let mut plan = running_sup_policy(&constant(&g, 1, 10.0), &theta, 1.0).unwrap();
        assert!(admissibility_report(&plan, &theta).unwrap().admissible());
        plan.firm_mut(0).path_mut(0)[2] = 5.5;
        let r = admissibility_report(&plan, &theta).unwrap();
        assert_eq!(r.excess_nodes.len(), 1);
        assert_eq!(r.excess_nodes[0].1, 2);
        assert_relative_eq!(r.max_excess[0], 0.5);
        assert_eq!(r.monotonicity_violations, vec![(0, 0, 3)]);
        plan.firm_mut(0).path_mut(0)[0] = 0.9;
        assert_eq!(admissibility_report(&plan, &theta).unwrap().initial_mismatches, vec![(0, 0)]);
    }

    #[test]
    fn hitting_examples() {
        let g = make_grid(1.0, 10).unwrap();
        let h = hitting_times(&constant(&g, 3, 2.0), &constant(&g, 3, 5.0), 0.0, None, None).unwrap();
        assert!(h.aggregate.iter().all(Option::is_none));

        let l = PathEnsemble::deterministic(&g, 1, |t| t).unwrap();
        let h = hitting_times(&l, &constant(&g, 1, 0.5), 0.0, None, None).unwrap();
        assert_eq!(h.aggregate, vec![Some(6)]);
        let h = hitting_times(&l, &constant(&g, 1, 0.5), 0.8, None, None).unwrap();
        assert_eq!(h.aggregate, vec![Some(8)]);
        let h = hitting_times(&l, &constant(&g, 1, 0.95), 0.0, None, None).unwrap();
        assert_eq!(h.aggregate, vec![Some(10)]);
        assert_eq!(h.censored, vec![true]);
        assert!(hitting_times(&l, &constant(&g, 1, 0.5), 0.55, None, None).is_err());
    }

    #[test]
    fn comonotone_per_firm_times_agree() {
        let g = make_grid(1.0, 50).unwrap();
        let x = crate::paths::simulate_shock(
            &crate::paths::ShockModel::GeometricBrownian { x0: 1.0, mu: 0.0, sigma: 0.5 },
            &g,
            200,
            3,
        )
        .unwrap();
        let k = [0.7, 1.3];
        let w = allocation_weights(&k).unwrap();
        let each: Vec<_> = k.iter().map(|&ki| x.map(move |v| ki * v)).collect();
        let agg = x.map(|v| 2.0 * v);
        let theta = constant(&g, 200, 2.2);
        let h = hitting_times(&agg, &theta, 0.0, Some(&w), Some(&each)).unwrap();
        assert!(h.disagreements.is_empty());
        assert!(h.aggregate.iter().any(Option::is_some));
    }

    proptest! {
        #[test]
        fn more_fuel_more_investment(seed in 0u64..1000, bump in 0.0f64..2.0) {
            let g = make_grid(1.0, 40).unwrap();
            let model = crate::paths::ShockModel::GeometricBrownian { x0: 1.0, mu: 0.1, sigma: 0.6 };
            let l = crate::paths::simulate_shock(&model, &g, 8, seed).unwrap();
            let fuel = crate::paths::FuelModel::RunningMaxGeometric { theta0: 1.1, mu_f: 0.0, sigma_f: 0.4 };
            let t1 = crate::paths::simulate_fuel(&fuel, &g, 8, seed + 1).unwrap();
            let t2 = t1.map(|v| v + bump);
            let p1 = running_sup_policy(&l, &t1, 0.5).unwrap();
            let p2 = running_sup_policy(&l, &t2, 0.5).unwrap();
            for (a, b) in p1.firm(0).values().iter().zip(p2.firm(0).values()) {
                prop_assert!(a <= b);
            }
        }
    }
}
