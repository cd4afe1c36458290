use std::path::PathBuf;

/// Error type shared across the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("timestep out of range: {0}")]
    Timestep(String),

    #[error("degenerate schedule: {0}")]
    DegenerateSchedule(String),

    /// A non-differentiable reward was used on a path that requires gradients,
    /// or vice versa.
    #[error("gradient mode error: {0}")]
    Mode(String),

    #[error("training diverged at step {step}: {msg}")]
    Training { step: usize, msg: String },

    #[error("alignment failed at timestep {t}, inner step {inner}: {msg}")]
    Alignment { t: usize, inner: usize, msg: String },

    #[error("zeroth-order objective evaluation failed at perturbation {index}: {source}")]
    ZoEval {
        index: usize,
        source: Box<Error>,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
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

pub type Result<T> = std::result::Result<T, Error>;
