use thiserror::Error;

/// Errors raised by model construction, simulation and the solvers.
#[derive(Error, Debug, Clone, PartialEq)]
pub enum DedpError {
    /// Total event rate at a state exceeds one; the step length or the
    /// coefficient scale is invalid for that state.
    #[error("total event rate {total} exceeds 1 at clock {clock}")]
    RateOverflow { total: f64, clock: u32 },

    /// An event would move a component outside its domain.
    #[error("component {component} would leave its domain (value {value}, max {max})")]
    DomainViolation {
        component: usize,
        value: i64,
        max: u32,
    },

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid policy: {0}")]
    InvalidPolicy(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// Enumeration would exceed the configured cap.
    #[error("enumeration exceeds cap: {size} > {cap}")]
    SpaceTooLarge { size: usize, cap: usize },

    #[error("negative reward {value} at step {step}, component {component}")]
    NegativeReward {
        value: f64,
        step: usize,
        component: usize,
    },

    #[error("message passing did not converge: residual {residual} after {iterations} sweeps")]
    NonConvergence { residual: f64, iterations: usize },

    /// A null-event probability of zero carries positive posterior mass.
    #[error("gradient undefined: zero null-event probability with positive mass at step {step}")]
    DivisionDomain { step: usize },

    #[error("line search failed after {attempts} step reductions")]
    LineSearchFailed { attempts: usize },

    #[error("io error: {0}")]
    Io(String),
}

impl DedpError {
    /// True for errors that come from numerics rather than input validation.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            DedpError::RateOverflow { .. }
                | DedpError::NonConvergence { .. }
                | DedpError::DivisionDomain { .. }
                | DedpError::LineSearchFailed { .. }
        )
    }
}

impl From<std::io::Error> for DedpError {
    fn from(e: std::io::Error) -> Self {
        DedpError::Io(e.to_string())
    }
}

impl From<csv::Error> for DedpError {
    fn from(e: csv::Error) -> Self {
        DedpError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, DedpError>;
