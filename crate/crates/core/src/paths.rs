//! Time grids, reproducible random streams and path ensembles for the
//! economic shock and the fuel (resource) process.
//!
//! Every path draws from its own ChaCha stream keyed by
//! `(master_seed, stream_id, path_index)`, so an ensemble does not depend on
//! how the work is scheduled across threads.

use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, invalid, FuelError, Result};

/// Stream identifiers. Each consumer of randomness owns one so that streams
/// never overlap (e.g. fuel is independent of the shock).
pub mod streams {
    pub const SHOCK: u64 = 0x5348_4f43;
    pub const FUEL: u64 = 0x4655_454c;
    pub const BRIDGE: u64 = 0x4252_4447;
    pub const INNER: u64 = 0x494e_4e52;
    pub const INNER_BRIDGE: u64 = 0x494e_4252;
    pub const SAMPLING: u64 = 0x5341_4d50;
    pub const CHALLENGER: u64 = 0x4348_4c47;
    pub const ORACLE: u64 = 0x4f52_434c;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Counter-based generator for one logical stream. `words` identifies the
/// stream (stream id, path index, and any further coordinates).
pub fn stream_rng(master_seed: u64, words: &[u64]) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    let mut state = splitmix64(master_seed);
    for &w in words {
        state = splitmix64(state ^ splitmix64(w.wrapping_add(0x632b_e59b_d9b4_e019)));
    }
    for (i, chunk) in key.chunks_mut(8).enumerate() {
        state = splitmix64(state.wrapping_add(i as u64));
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Uniform draw on (0, 1], safe for `ln`.
#[inline]
pub(crate) fn open_uniform<R: Rng>(rng: &mut R) -> f64 {
    1.0 - rng.random::<f64>()
}

#[inline]
pub(crate) fn std_normal<R: Rng>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// Maximum of a Brownian bridge from `a` to `b` with total variance `var`
/// over the interval, given a uniform draw `u` in (0, 1].
#[inline]
pub fn bridge_max(a: f64, b: f64, var: f64, u: f64) -> f64 {
    if var <= 0.0 {
        return a.max(b);
    }
    let d = b - a;
    0.5 * (a + b + (d * d - 2.0 * var * u.ln()).sqrt())
}

/// Uniform discretization of `[0, t_max]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    t_max: f64,
    n_steps: usize,
    nodes: Vec<f64>,
}

impl TimeGrid {
    pub fn t_max(&self) -> f64 {
        self.t_max
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn n_nodes(&self) -> usize {
        self.n_steps + 1
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn dt(&self) -> f64 {
        self.t_max / self.n_steps as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        self.nodes[k]
    }

    /// Index of the node equal to `t` (up to rounding), if any.
    pub fn node_index(&self, t: f64) -> Option<usize> {
        let pos = t / self.dt();
        let k = pos.round();
        if k < 0.0 || k > self.n_steps as f64 {
            return None;
        }
        let k = k as usize;
        ((self.nodes[k] - t).abs() <= 1e-9 * self.dt().max(1.0)).then_some(k)
    }
}

/// Builds the uniform grid `t_k = k * t_max / n_steps`.
pub fn make_grid(t_max: f64, n_steps: usize) -> Result<TimeGrid> {
    ensure(t_max.is_finite() && t_max > 0.0, || {
        format!("t_max must be finite and > 0, got {t_max}")
    })?;
    ensure(n_steps >= 1, || "n_steps must be >= 1".to_string())?;
    let dt = t_max / n_steps as f64;
    let mut nodes: Vec<f64> = (0..=n_steps).map(|k| k as f64 * dt).collect();
    nodes[n_steps] = t_max;
    Ok(TimeGrid { t_max, n_steps, nodes })
}

/// Exogenous shock driving operating profits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ShockModel {
    /// `X(t) = x0 exp((mu - sigma^2/2) t + sigma W(t))`.
    GeometricBrownian { x0: f64, mu: f64, sigma: f64 },
    /// `W(t) = w0 + sigma B(t)`; `sigma = 1` is standard Brownian motion.
    ArithmeticBrownian {
        w0: f64,
        #[serde(default = "unit_sigma")]
        sigma: f64,
    },
}

fn unit_sigma() -> f64 {
    1.0
}

impl ShockModel {
    pub fn standard_brownian() -> Self {
        ShockModel::ArithmeticBrownian { w0: 0.0, sigma: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            ShockModel::GeometricBrownian { x0, mu, sigma } => {
                ensure(x0.is_finite() && x0 > 0.0, || format!("x0 must be > 0, got {x0}"))?;
                ensure(mu.is_finite(), || format!("mu must be finite, got {mu}"))?;
                ensure(sigma.is_finite() && sigma >= 0.0, || {
                    format!("sigma must be >= 0, got {sigma}")
                })
            }
            ShockModel::ArithmeticBrownian { w0, sigma } => {
                ensure(w0.is_finite(), || format!("w0 must be finite, got {w0}"))?;
                ensure(sigma.is_finite() && sigma >= 0.0, || {
                    format!("sigma must be >= 0, got {sigma}")
                })
            }
        }
    }

    pub fn sigma(&self) -> f64 {
        match *self {
            ShockModel::GeometricBrownian { sigma, .. } => sigma,
            ShockModel::ArithmeticBrownian { sigma, .. } => sigma,
        }
    }

    pub fn initial(&self) -> f64 {
        match *self {
            ShockModel::GeometricBrownian { x0, .. } => x0,
            ShockModel::ArithmeticBrownian { w0, .. } => w0,
        }
    }

    /// Drift of `ln X` (GBM) or of `W` (arithmetic, zero).
    pub fn log_drift(&self) -> f64 {
        match *self {
            ShockModel::GeometricBrownian { mu, sigma, .. } => mu - 0.5 * sigma * sigma,
            ShockModel::ArithmeticBrownian { .. } => 0.0,
        }
    }

    pub fn is_geometric(&self) -> bool {
        matches!(self, ShockModel::GeometricBrownian { .. })
    }

    /// Coordinate in which the process is a Brownian motion with drift.
    #[inline]
    pub fn to_gaussian(&self, v: f64) -> f64 {
        if self.is_geometric() {
            v.ln()
        } else {
            v
        }
    }

    #[inline]
    pub fn from_gaussian(&self, g: f64) -> f64 {
        if self.is_geometric() {
            g.exp()
        } else {
            g
        }
    }

    /// One exact step of length `dt` from `v` driven by the normal `z`.
    #[inline]
    pub fn step(&self, v: f64, dt: f64, z: f64) -> f64 {
        match *self {
            ShockModel::GeometricBrownian { mu, sigma, .. } => {
                v * ((mu - 0.5 * sigma * sigma) * dt + sigma * dt.sqrt() * z).exp()
            }
            ShockModel::ArithmeticBrownian { sigma, .. } => v + sigma * dt.sqrt() * z,
        }
    }
}

/// Generator of the nondecreasing fuel process `theta(t)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum FuelModel {
    Constant { theta0: f64 },
    #[serde(rename = "affine")]
    AffineDeterministic { theta0: f64, rate: f64 },
    /// `theta(t) = theta0 ∨ sup_{s<t} xi(s)` for an independent GBM `xi`
    /// with `xi(0) = theta0`.
    RunningMaxGeometric { theta0: f64, mu_f: f64, sigma_f: f64 },
}

impl FuelModel {
    pub fn theta0(&self) -> f64 {
        match *self {
            FuelModel::Constant { theta0 }
            | FuelModel::AffineDeterministic { theta0, .. }
            | FuelModel::RunningMaxGeometric { theta0, .. } => theta0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let theta0 = self.theta0();
        ensure(theta0.is_finite() && theta0 > 0.0, || {
            format!("theta0 must be > 0, got {theta0}")
        })?;
        match *self {
            FuelModel::Constant { .. } => Ok(()),
            FuelModel::AffineDeterministic { rate, .. } => ensure(rate.is_finite() && rate >= 0.0, || {
                format!("fuel rate must be >= 0, got {rate}")
            }),
            FuelModel::RunningMaxGeometric { mu_f, sigma_f, .. } => {
                ensure(mu_f.is_finite(), || format!("mu_f must be finite, got {mu_f}"))?;
                ensure(sigma_f.is_finite() && sigma_f > 0.0, || {
                    format!("sigma_f must be > 0, got {sigma_f}")
                })
            }
        }
    }

    pub fn is_deterministic(&self) -> bool {
        !matches!(self, FuelModel::RunningMaxGeometric { .. })
    }

    /// Value at time `t` for the deterministic variants.
    pub fn deterministic_value(&self, t: f64) -> Option<f64> {
        match *self {
            FuelModel::Constant { theta0 } => Some(theta0),
            FuelModel::AffineDeterministic { theta0, rate } => Some(theta0 + rate * t),
            FuelModel::RunningMaxGeometric { .. } => None,
        }
    }
}

/// Per-path values of a process on a grid, row-major (one row per path).
#[derive(Debug, Clone, PartialEq)]
pub struct PathEnsemble {
    grid: TimeGrid,
    n_paths: usize,
    values: Vec<f64>,
    master_seed: u64,
}

impl PathEnsemble {
    pub fn from_values(grid: TimeGrid, n_paths: usize, values: Vec<f64>, master_seed: u64) -> Result<Self> {
        ensure(n_paths >= 1, || "n_paths must be >= 1".to_string())?;
        ensure(values.len() == n_paths * grid.n_nodes(), || {
            format!(
                "expected {} values for {} paths x {} nodes, got {}",
                n_paths * grid.n_nodes(),
                n_paths,
                grid.n_nodes(),
                values.len()
            )
        })?;
        Ok(PathEnsemble { grid, n_paths, values, master_seed })
    }

    /// Every path equal to `f(t_k)`.
    pub fn deterministic(grid: &TimeGrid, n_paths: usize, f: impl Fn(f64) -> f64) -> Result<Self> {
        let row: Vec<f64> = grid.nodes().iter().map(|&t| f(t)).collect();
        let values = row.iter().copied().cycle().take(n_paths * row.len()).collect();
        Self::from_values(grid.clone(), n_paths, values, 0)
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn path(&self, i: usize) -> &[f64] {
        let n = self.grid.n_nodes();
        &self.values[i * n..(i + 1) * n]
    }

    pub fn path_mut(&mut self, i: usize) -> &mut [f64] {
        let n = self.grid.n_nodes();
        &mut self.values[i * n..(i + 1) * n]
    }

    pub fn get(&self, path: usize, node: usize) -> f64 {
        self.values[path * self.grid.n_nodes() + node]
    }

    pub fn paths(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks(self.grid.n_nodes())
    }

    /// Values at node `k` across paths.
    pub fn column(&self, k: usize) -> Vec<f64> {
        self.paths().map(|p| p[k]).collect()
    }

    /// Pointwise transform, keeping grid and seed.
    pub fn map(&self, f: impl Fn(f64) -> f64 + Sync) -> PathEnsemble {
        PathEnsemble {
            grid: self.grid.clone(),
            n_paths: self.n_paths,
            values: self.values.par_iter().map(|&v| f(v)).collect(),
            master_seed: self.master_seed,
        }
    }

    pub fn same_shape(&self, other: &PathEnsemble) -> bool {
        self.n_paths == other.n_paths && self.grid == other.grid
    }

    /// CSV: a header of node times, then one row per path. Numbers use 17
    /// significant digits so that they round-trip exactly.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let header: Vec<String> = self.grid.nodes().iter().map(|t| fmt17(*t)).collect();
        writeln!(out, "{}", header.join(","))?;
        for row in self.paths() {
            let line: Vec<String> = row.iter().map(|v| fmt17(*v)).collect();
            writeln!(out, "{}", line.join(","))?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let header = lines.next().ok_or_else(|| invalid("empty CSV"))??;
        let times = parse_row(&header, 1)?;
        ensure(times.len() >= 2, || "CSV needs at least two node columns".to_string())?;
        let grid = make_grid(times[times.len() - 1], times.len() - 1)?;
        for (k, (&t, &g)) in times.iter().zip(grid.nodes()).enumerate() {
            ensure((t - g).abs() <= 1e-12 * grid.t_max().max(1.0), || {
                format!("header column {k} ({t}) is not on a uniform grid")
            })?;
        }
        let mut values = Vec::new();
        let mut n_paths = 0;
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let row = parse_row(&line, lineno + 2)?;
            ensure(row.len() == grid.n_nodes(), || {
                format!("line {}: expected {} columns, got {}", lineno + 2, grid.n_nodes(), row.len())
            })?;
            values.extend(row);
            n_paths += 1;
        }
        Self::from_values(grid, n_paths, values, 0)
    }
}

pub(crate) fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

fn parse_row(line: &str, lineno: usize) -> Result<Vec<f64>> {
    line.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| invalid(format!("line {lineno}: cannot parse {s:?}: {e}")))
        })
        .collect()
}

fn fill_paths(grid: &TimeGrid, n_paths: usize, seed: u64, fill: impl Fn(usize, &mut [f64]) + Sync) -> PathEnsemble {
    let n = grid.n_nodes();
    let mut values = vec![0.0; n_paths * n];
    values.par_chunks_mut(n).enumerate().for_each(|(i, row)| fill(i, row));
    PathEnsemble { grid: grid.clone(), n_paths, values, master_seed: seed }
}

/// Simulates the shock on `grid`. GBM uses the exact log-Euler recursion.
pub fn simulate_shock(model: &ShockModel, grid: &TimeGrid, n_paths: usize, seed: u64) -> Result<PathEnsemble> {
    model.validate()?;
    ensure(n_paths >= 1, || "n_paths must be >= 1".to_string())?;
    let dt = grid.dt();
    let sd = model.sigma() * dt.sqrt();
    let drift = model.log_drift() * dt;
    let start = model.to_gaussian(model.initial());
    let model = *model;
    Ok(fill_paths(grid, n_paths, seed, |i, row| {
        let mut rng = stream_rng(seed, &[streams::SHOCK, i as u64]);
        let mut g = start;
        row[0] = model.initial();
        for v in row.iter_mut().skip(1) {
            let z = std_normal(&mut rng);
            g += drift + sd * z;
            *v = model.from_gaussian(g);
        }
    }))
}

/// Simulates the fuel process. Paths are nondecreasing and start at theta0.
pub fn simulate_fuel(model: &FuelModel, grid: &TimeGrid, n_paths: usize, seed: u64) -> Result<PathEnsemble> {
    model.validate()?;
    ensure(n_paths >= 1, || "n_paths must be >= 1".to_string())?;
    let model = *model;
    match model {
        FuelModel::Constant { theta0 } => {
            let mut e = PathEnsemble::deterministic(grid, n_paths, |_| theta0)?;
            e.master_seed = seed;
            Ok(e)
        }
        FuelModel::AffineDeterministic { theta0, rate } => {
            let mut e = PathEnsemble::deterministic(grid, n_paths, |t| theta0 + rate * t)?;
            e.master_seed = seed;
            Ok(e)
        }
        FuelModel::RunningMaxGeometric { theta0, mu_f, sigma_f } => {
            let dt = grid.dt();
            let drift = (mu_f - 0.5 * sigma_f * sigma_f) * dt;
            let sd = sigma_f * dt.sqrt();
            Ok(fill_paths(grid, n_paths, seed, |i, row| {
                let mut rng = stream_rng(seed, &[streams::FUEL, i as u64]);
                // theta at node k uses xi at nodes strictly before k.
                let mut log_xi = theta0.ln();
                let mut running = theta0;
                row[0] = theta0;
                for v in row.iter_mut().skip(1) {
                    running = running.max(log_xi.exp());
                    *v = running;
                    log_xi += drift + sd * std_normal(&mut rng);
                }
            }))
        }
    }
}

/// Per-interval maxima `sup_{[t_k, t_{k+1}]}` of a Brownian-type shock,
/// sampled exactly from the bridge law given the node values.
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalMaxima {
    n_steps: usize,
    values: Vec<f64>,
}

impl IntervalMaxima {
    pub fn path(&self, i: usize) -> &[f64] {
        &self.values[i * self.n_steps..(i + 1) * self.n_steps]
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }
}

pub fn sample_interval_maxima(model: &ShockModel, shock: &PathEnsemble, seed: u64) -> Result<IntervalMaxima> {
    model.validate()?;
    let n_steps = shock.grid().n_steps();
    let var = model.sigma().powi(2) * shock.grid().dt();
    let mut values = vec![0.0; shock.n_paths() * n_steps];
    let model = *model;
    values.par_chunks_mut(n_steps).enumerate().for_each(|(i, out)| {
        let mut rng = stream_rng(seed, &[streams::BRIDGE, i as u64]);
        let path = shock.path(i);
        for (k, m) in out.iter_mut().enumerate() {
            let a = model.to_gaussian(path[k]);
            let b = model.to_gaussian(path[k + 1]);
            *m = model.from_gaussian(bridge_max(a, b, var, open_uniform(&mut rng)));
        }
    });
    Ok(IntervalMaxima { n_steps, values })
}

/// Mean and standard error of a sample, summed in index order.
pub fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

impl From<std::num::ParseFloatError> for FuelError {
    fn from(err: std::num::ParseFloatError) -> Self {
        FuelError::InvalidArgument(err.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn grid_examples() {
        let g = make_grid(1.0, 4).unwrap();
        assert_eq!(g.nodes(), &[0.0, 0.25, 0.5, 0.75, 1.0]);
        let g = make_grid(10.0, 1).unwrap();
        assert_eq!(g.nodes(), &[0.0, 10.0]);
        assert!(matches!(make_grid(0.0, 4), Err(FuelError::InvalidArgument(_))));
        assert!(make_grid(1.0, 0).is_err());
        assert!(make_grid(-1.0, 3).is_err());
    }

    #[test]
    fn node_lookup() {
        let g = make_grid(1.0, 10).unwrap();
        assert_eq!(g.node_index(0.3), Some(3));
        assert_eq!(g.node_index(0.0), Some(0));
        assert_eq!(g.node_index(1.0), Some(10));
        assert_eq!(g.node_index(0.35), None);
        assert_eq!(g.node_index(1.5), None);
    }

    #[test]
    fn zero_volatility_gbm_is_deterministic() {
        let g = make_grid(2.0, 8).unwrap();
        let m = ShockModel::GeometricBrownian { x0: 1.0, mu: 0.1, sigma: 0.0 };
        let e = simulate_shock(&m, &g, 3, 7).unwrap();
        for p in e.paths() {
            for (v, t) in p.iter().zip(g.nodes()) {
                assert_relative_eq!(*v, (0.1 * t).exp(), max_relative = 1e-14);
            }
        }
    }

    #[test]
    fn gbm_terminal_mean() {
        let g = make_grid(1.0, 100).unwrap();
        let m = ShockModel::GeometricBrownian { x0: 1.0, mu: 0.05, sigma: 0.3 };
        let e = simulate_shock(&m, &g, 100_000, 11).unwrap();
        let (mean, se) = mean_and_se(&e.column(100));
        assert!((mean - 0.05f64.exp()).abs() <= 3.0 * se, "mean {mean} se {se}");
    }

    #[test]
    fn brownian_terminal_variance() {
        let g = make_grid(2.0, 50).unwrap();
        let e = simulate_shock(&ShockModel::standard_brownian(), &g, 50_000, 3).unwrap();
        let sq: Vec<f64> = e.column(50).iter().map(|w| w * w).collect();
        let (var, se) = mean_and_se(&sq);
        assert!((var - 2.0).abs() <= 4.0 * se, "var {var} se {se}");
    }

    #[test]
    fn same_seed_same_ensemble() {
        let g = make_grid(1.0, 20).unwrap();
        let m = ShockModel::GeometricBrownian { x0: 1.0, mu: 0.0, sigma: 0.4 };
        let a = simulate_shock(&m, &g, 64, 99).unwrap();
        let b = simulate_shock(&m, &g, 64, 99).unwrap();
        assert_eq!(a, b);
        let c = simulate_shock(&m, &g, 64, 100).unwrap();
        assert_ne!(a.values(), c.values());
    }

    #[test]
    fn fuel_examples() {
        let g = make_grid(1.0, 4).unwrap();
        let c = simulate_fuel(&FuelModel::Constant { theta0: 5.0 }, &g, 3, 1).unwrap();
        assert!(c.values().iter().all(|&v| v == 5.0));
        let a = simulate_fuel(&FuelModel::AffineDeterministic { theta0: 1.0, rate: 2.0 }, &g, 2, 1).unwrap();
        for p in a.paths() {
            assert_eq!(p, &[1.0, 1.5, 2.0, 2.5, 3.0]);
        }
        let r = simulate_fuel(
            &FuelModel::RunningMaxGeometric { theta0: 1.0, mu_f: 0.0, sigma_f: 0.5 },
            &make_grid(1.0, 200).unwrap(),
            200,
            4,
        )
        .unwrap();
        for p in r.paths() {
            assert_eq!(p[0], 1.0);
            assert!(p.windows(2).all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn fuel_uses_strictly_prior_nodes() {
        let g = make_grid(1.0, 50).unwrap();
        let model = FuelModel::RunningMaxGeometric { theta0: 1.0, mu_f: 0.0, sigma_f: 0.8 };
        let e = simulate_fuel(&model, &g, 1, 5).unwrap();
        let mut rng = stream_rng(5, &[streams::FUEL, 0]);
        let dt = g.dt();
        let mut xi = vec![1.0f64];
        for _ in 0..50 {
            let last = *xi.last().unwrap();
            xi.push((last.ln() + (-0.32) * dt + 0.8 * dt.sqrt() * std_normal(&mut rng)).exp());
        }
        for k in 1..=50 {
            let expected = xi[..k].iter().cloned().fold(1.0, f64::max);
            assert_relative_eq!(e.get(0, k), expected, max_relative = 1e-12);
        }
    }

    #[test]
    fn bridge_max_dominates_endpoints() {
        for &u in &[1.0, 0.5, 1e-6] {
            let m = bridge_max(0.2, -0.1, 0.01, u);
            assert!(m >= 0.2);
        }
        assert_eq!(bridge_max(0.3, 0.1, 0.0, 0.4), 0.3);
    }

    #[test]
    fn csv_header_and_rows() {
        let g = make_grid(1.0, 2).unwrap();
        let e = PathEnsemble::from_values(g, 2, vec![1.0, 2.0, 3.0, 0.1, 0.2, 1.0 / 3.0], 0).unwrap();
        let mut buf = Vec::new();
        e.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let first = text.lines().next().unwrap();
        assert_eq!(first, "0.0000000000000000e0,5.0000000000000000e-1,1.0000000000000000e0");
        let back = PathEnsemble::read_csv(text.as_bytes()).unwrap();
        assert_eq!(back.values(), e.values());
    }

    #[test]
    fn mismatched_values_rejected() {
        let g = make_grid(1.0, 2).unwrap();
        assert!(PathEnsemble::from_values(g, 2, vec![0.0; 5], 0).is_err());
    }
}
