use serde::{Deserialize, Serialize};

/// Monte Carlo estimate with its standard error and, for quantities
/// computed on a truncated horizon, a bound on the neglected tail.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub std_error: f64,
    pub n_paths: usize,
    pub tail_bound: f64,
}

impl Estimate {
    /// Sample mean and standard error, summed in index order so the result
    /// does not depend on how the samples were produced.
    pub fn from_samples(samples: &[f64], tail_bound: f64) -> Self {
        let (mean, std_error) = crate::paths::mean_and_se(samples);
        Estimate { mean, std_error, n_paths: samples.len(), tail_bound }
    }

    pub fn exact(value: f64) -> Self {
        Estimate { mean: value, std_error: 0.0, n_paths: 0, tail_bound: 0.0 }
    }

    /// `|mean - target| <= k * SE`.
    pub fn within(&self, target: f64, k: f64) -> bool {
        (self.mean - target).abs() <= k * self.std_error
    }

    /// Standard error of the difference of two independent estimates.
    pub fn combined_se(&self, other: &Estimate) -> f64 {
        self.std_error.hypot(other.std_error)
    }
}

/// Path count, grid and seed for one Monte Carlo run.
#[derive(Debug, Clone, PartialEq)]
pub struct McConfig {
    pub n_paths: usize,
    pub grid: crate::paths::TimeGrid,
    pub seed: u64,
}

impl McConfig {
    pub fn new(n_paths: usize, grid: crate::paths::TimeGrid, seed: u64) -> Self {
        McConfig { n_paths, grid, seed }
    }
}
