use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{name} = {value} is outside its domain ({expected})")]
    Domain {
        name: &'static str,
        value: f64,
        expected: &'static str,
    },

    #[error("ensemble has no trajectories")]
    EmptyEnsemble,

    #[error("time slice {slice} out of range (ensemble has {n_slices} slices)")]
    SliceOutOfRange { slice: usize, n_slices: usize },

    #[error("binning mismatch: {0}")]
    BinningMismatch(String),

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("inconsistent parameters: {0}")]
    Inconsistent(String),

    #[error("fit failed: {0}")]
    FitFailed(String),

    #[error("Fokker-Planck scheme failure at t = {t}: {reason}")]
    SchemeFailure { t: f64, reason: String },

    #[error("cannot allocate storage for {0} values")]
    Resource(usize),

    #[error("{location}: {message}")]
    Format { location: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn domain(name: &'static str, value: f64, expected: &'static str) -> Self {
        Error::Domain {
            name,
            value,
            expected,
        }
    }

    pub(crate) fn format(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            location: location.into(),
            message: message.into(),
        }
    }
}
