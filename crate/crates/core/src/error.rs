use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, Error)]
pub enum Error {
    #[error("increment distribution violates the {moment} moment condition (residual {residual:.3e})")]
    MomentViolation { moment: &'static str, residual: f64 },

    #[error("invalid increment distribution: {0}")]
    InvalidDistribution(String),

    #[error("tree has {leaves} leaves, above the limit of {limit}")]
    TreeTooLarge { leaves: u128, limit: u128 },

    #[error("horizon must be at least 1")]
    ZeroHorizon,

    #[error("time index {t} out of range (max {max})")]
    TimeOutOfRange { t: usize, max: usize },

    #[error("shape mismatch for {what}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        what: String,
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("non-finite value from {what} at t={t}, node={node}")]
    NonFinite {
        what: &'static str,
        t: usize,
        node: usize,
    },

    #[error("generator depends on z at the terminal time (difference {difference:.3e})")]
    TerminalZDependence { difference: f64 },

    #[error("partially coupled problem: {coefficient} reads y or z at t={t} (difference {difference:.3e})")]
    CouplingViolation {
        coefficient: &'static str,
        t: usize,
        difference: f64,
    },

    #[error("fixed-point iteration did not converge after {iterations} iterations (last change {last_change:.3e}); try the Newton solver")]
    NotConverged {
        iterations: usize,
        last_change: f64,
        trace: Vec<f64>,
    },

    #[error("singular Newton Jacobian (condition estimate {condition_estimate:.3e})")]
    SingularJacobian { condition_estimate: f64 },

    #[error("Newton residual stalled at {residual:.3e} after {iterations} iterations")]
    NewtonStalled { iterations: usize, residual: f64 },

    #[error("stacked system has {unknowns} unknowns, above the cap of {cap}")]
    TooManyUnknowns { unknowns: usize, cap: usize },

    #[error("control infeasible at t={t}, node={node}, component {component}: {value} not in [{lower}, {upper}]")]
    Infeasible {
        t: usize,
        node: usize,
        component: usize,
        value: f64,
        lower: f64,
        upper: f64,
    },

    #[error("empty control box in component {component}: [{lower}, {upper}]")]
    EmptyBox {
        component: usize,
        lower: f64,
        upper: f64,
    },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("{}", config_message(.field, .line, .message))]
    Config {
        field: String,
        line: Option<usize>,
        message: String,
    },
}

fn config_message(field: &str, line: &Option<usize>, message: &str) -> String {
    match line {
        Some(l) => format!("config field `{field}` (line {l}): {message}"),
        None => format!("config field `{field}`: {message}"),
    }
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            line: None,
            message: message.into(),
        }
    }
}
