use thiserror::Error;

/// Errors raised by model construction, dynamics evaluation and integration.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// Malformed or inconsistent input data.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A Hessian block is not positive definite.
    #[error("singular hessian{}", agent_suffix(*.agent))]
    SingularHessian { agent: Option<usize> },

    /// A constraint matrix lacks full row rank or its Schur complement is singular.
    #[error("rank-deficient constraint matrix{}", agent_suffix(*.agent))]
    RankDeficient { agent: Option<usize> },

    /// A barrier argument `s - g` left the open positive half-line.
    #[error("barrier domain violated{} (margin {margin:e})", agent_suffix(*.agent))]
    DomainViolation { agent: Option<usize>, margin: f64 },

    /// The initial point is outside the barrier domain.
    #[error("initial point outside barrier domain{} (margin {margin:e})", agent_suffix(*.agent))]
    InfeasibleStart { agent: Option<usize>, margin: f64 },

    /// Step size fell below the configured minimum.
    #[error("step size underflow at t = {t}")]
    StepUnderflow { t: f64 },

    /// Step budget exhausted before reaching the horizon.
    #[error("maximum number of steps ({steps}) exceeded at t = {t}")]
    MaxStepsExceeded { t: f64, steps: usize },

    /// An iterative solver stopped without meeting its tolerance.
    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    /// Configuration could not be parsed or is inconsistent.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(String),
}

fn agent_suffix(agent: Option<usize>) -> String {
    match agent {
        Some(i) => format!(" at agent {}", i + 1),
        None => String::new(),
    }
}

impl Error {
    /// Attach an agent index to errors that carry one.
    pub fn at_agent(self, i: usize) -> Self {
        match self {
            Error::SingularHessian { .. } => Error::SingularHessian { agent: Some(i) },
            Error::RankDeficient { .. } => Error::RankDeficient { agent: Some(i) },
            Error::DomainViolation { margin, .. } => Error::DomainViolation {
                agent: Some(i),
                margin,
            },
            Error::InfeasibleStart { margin, .. } => Error::InfeasibleStart {
                agent: Some(i),
                margin,
            },
            other => other,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
