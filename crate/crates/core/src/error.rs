use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// The eigen-gap at the requested subspace dimension is below tolerance.
    #[error("degenerate spectrum: eigen-gap {gap:e} at d'={d_prime} is below tolerance {tol:e}")]
    DegenerateSpectrum { gap: f64, d_prime: usize, tol: f64 },

    #[error("class {class} has no samples in {context}")]
    MissingClass { class: usize, context: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("numerical abort: {0}")]
    NumericalAbort(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
