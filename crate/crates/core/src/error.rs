use thiserror::Error;

/// Errors raised by the solvers, simulators and file loaders.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Malformed input: wrong shapes, non-finite entries, bad parameters.
    #[error("structural error: {0}")]
    Structural(String),

    /// A parameter combination the caller asked for cannot be honoured.
    #[error("configuration error: {0}")]
    Config(String),

    /// Problem file could not be turned into a specification.
    #[error("load error in field `{field}`: {message}")]
    Load { field: String, message: String },

    /// The requested operation is outside what the selected backend supports.
    #[error("unsupported: {0}")]
    Unsupported(String),

    /// `R̂ + εI` lost positive definiteness during a Riccati solve.
    #[error("convexity violation suspected at s = {time} (regime {regime}): R_hat + eps*I is not positive definite")]
    ConvexityViolation { time: f64, regime: usize },

    /// The Riccati solution left every bounded set before reaching the start of the grid.
    #[error("finite-time escape of the Riccati solution at s = {time} (eps = {epsilon})")]
    FiniteTimeEscape { time: f64, epsilon: f64 },

    /// A gain was requested at `ε = 0` from a solution that is not regular.
    #[error("singular gain system at s = {time} (regime {regime}) and the Riccati solution is not regular")]
    NotRegular { time: f64, regime: usize },

    /// Forward simulation produced a non-finite value.
    #[error("simulation diverged on path {path} at node {node}")]
    Diverged { path: usize, node: usize },

    /// Two objects that must share a grid, epsilon or backend do not.
    #[error("mismatch: {0}")]
    Mismatch(String),

    /// Sub-solver failure inside an epsilon sweep.
    #[error("sweep failed at eps = {epsilon}: {source}")]
    Sweep {
        epsilon: f64,
        #[source]
        source: Box<Error>,
    },

    #[error("io error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl Error {
    pub(crate) fn load(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Load {
            field: field.into(),
            message: message.into(),
        }
    }
}
