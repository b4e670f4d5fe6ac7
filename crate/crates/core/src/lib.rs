//! Simulation and verification toolkit for irreversible investment under a
//! finite-fuel constraint.
//!
//! * [`paths`]: grids, reproducible shock and fuel ensembles
//! * [`profit`]: Cobb-Douglas profit and quadratic tracking cost
//! * [`base_capacity`]: closed-form base capacities and their residual check
//! * [`policy`]: running-supremum policies, N-firm allocation, hitting times
//! * [`eval`]: Monte Carlo functionals, multipliers and Kuhn-Tucker reports
//! * [`dp`]: lattice dynamic-programming oracle
//! * [`scenario`]: config-driven runs used by the command line front end

pub mod base_capacity;
pub mod dp;
pub mod error;
pub mod estimate;
pub mod eval;
pub mod paths;
pub mod policy;
pub mod profit;
pub mod scenario;

pub use error::{FuelError, Result};
pub use estimate::{Estimate, McConfig};
