use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("unsupported combination: {0}")]
    Unsupported(String),

    /// The source amplitude is not below the admissible threshold.
    #[error("source above threshold: sup-norm / Q0 = {ratio:.6} (limit {limit:.4})")]
    AboveThreshold { ratio: f64, limit: f64 },

    #[error("no convergence after {iterations} iterations (last residual {residual:.3e})")]
    NoConvergence { iterations: usize, residual: f64 },

    /// An iterate crossed the a priori norm bound, which only happens above threshold.
    #[error("iterate exceeded norm guard {guard:.6e} at sweep {iteration} (value {value:.6e})")]
    Diverged { iteration: usize, guard: f64, value: f64 },

    #[error("population explosion: {count} particles exceed cap {cap}")]
    Explosion { count: u64, cap: u64 },

    #[error("bound violated: {0}")]
    BoundViolation(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("invalid configuration:\n{}", Bullets(.0))]
    Config(Vec<String>),

    #[error("{context}: {source}")]
    Context { context: String, source: Box<Error> },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn context(self, context: impl Into<String>) -> Error {
        Error::Context { context: context.into(), source: Box::new(self) }
    }

    /// Strips context wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Context { source, .. } => source.root(),
            e => e,
        }
    }
}

struct Bullets<'a>(&'a [String]);

impl fmt::Display for Bullets<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, line) in self.0.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "  - {line}")?;
        }
        Ok(())
    }
}

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}
