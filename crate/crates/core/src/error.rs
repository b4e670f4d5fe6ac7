use thiserror::Error;

/// Errors raised by the simulation, evaluation and oracle layers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum FuelError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("integrability violation: discount-adjusted rate D = {d} must be positive")]
    IntegrabilityViolation { d: f64 },

    #[error("tail bound {bound:.3e} exceeds tolerance {tolerance:.3e}; extend the horizon")]
    TailBound { bound: f64, tolerance: f64 },

    #[error("infeasible initialization: {0}")]
    InfeasibleInitialization(String),

    #[error("unsupported model: {0}")]
    UnsupportedModel(String),

    #[error("unstable discretization: lattice probability p = {p} is outside (0, 1)")]
    UnstableDiscretization { p: f64 },

    #[error("state space needs {required_bytes} bytes, budget is {budget_bytes} bytes")]
    BudgetExceeded { required_bytes: u64, budget_bytes: u64 },

    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for FuelError {
    fn from(err: std::io::Error) -> Self {
        FuelError::Io(err.to_string())
    }
}

pub type Result<T> = std::result::Result<T, FuelError>;

pub(crate) fn invalid(msg: impl Into<String>) -> FuelError {
    FuelError::InvalidArgument(msg.into())
}

pub(crate) fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(FuelError::InvalidArgument(msg()))
    }
}
