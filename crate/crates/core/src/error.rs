use std::path::PathBuf;

/// Everything that can go wrong inside the simulation and analysis stack.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A configuration value violates a constructor invariant.
    #[error("config error in `{field}`: {reason}")]
    Config { field: String, reason: String },

    /// An argument lies outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// The force expression is singular at the given argument (x = 0).
    #[error("singular input: {0}")]
    Singular(&'static str),

    /// A point lies outside the computational rectangle.
    #[error("point ({x}, {y}) lies outside the domain")]
    OutOfDomain { x: f64, y: f64 },

    /// A caller broke a documented precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// The integrator produced a non-finite state.
    #[error("numerical blow-up at step {step} (t = {t}): {detail}")]
    BlowUp {
        step: usize,
        t: f64,
        detail: String,
        /// State before the failing step, for post-mortem output.
        last_finite: Option<Box<crate::dynamics::CoupledState>>,
    },

    /// An experiment produced no usable signal (every estimate censored).
    #[error("no signal: {0}")]
    NoSignal(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status for the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } => 2,
            Error::BlowUp { .. } => 3,
            Error::NoSignal(_) => 4,
            _ => 1,
        }
    }
}
