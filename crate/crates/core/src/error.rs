use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("unsupported dimension {0}")]
    UnsupportedDimension(usize),
    #[error("system is not volume expanding: J = {j}")]
    NotVolumeExpanding { j: f64 },
    #[error("fiber map is not a contraction: |C| = {norm}")]
    NotContracting { norm: f64 },
    #[error("base map is not strongly expanding: 1/|E^-1| = {mu_lower}")]
    NotExpanding { mu_lower: f64 },
    #[error("native partitions need a diagonal expanding matrix; supply a partition file")]
    NonDiagonalUnsupported,
    #[error("partition is not Markov: {0}")]
    NotMarkov(String),
    #[error("combinatorial blowup: {what} needs {count} items, cap is {cap}")]
    CombinatorialBlowup { what: String, count: f64, cap: u64 },
    #[error("word is not admissible at the given point")]
    WordNotAdmissibleAtPoint,
    #[error("word {0} does not land in the base word")]
    WordsNotLanding(String),
    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),
    #[error("constants infeasible outside C(d;E): {0}")]
    InfeasibleOutsideCdE(String),
    #[error("separation failure: {0}")]
    SeparationFailure(String),
    #[error("{source_name}:{line}:{column}: {message}")]
    Config { source_name: String, line: usize, column: usize, message: String },
}

impl Error {
    /// True for errors caused by a configured size cap.
    pub fn is_cap(&self) -> bool {
        matches!(self, Error::CombinatorialBlowup { .. })
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "InvalidInput",
            Error::Dimension(_) => "DimensionMismatch",
            Error::UnsupportedDimension(_) => "UnsupportedDimension",
            Error::NotVolumeExpanding { .. } => "NotVolumeExpanding",
            Error::NotContracting { .. } => "NotContracting",
            Error::NotExpanding { .. } => "NotExpanding",
            Error::NonDiagonalUnsupported => "NonDiagonalUnsupported",
            Error::NotMarkov(_) => "NotMarkov",
            Error::CombinatorialBlowup { .. } => "CombinatorialBlowup",
            Error::WordNotAdmissibleAtPoint => "WordNotAdmissibleAtPoint",
            Error::WordsNotLanding(_) => "WordsNotLanding",
            Error::InsufficientSamples(_) => "InsufficientSamples",
            Error::InfeasibleOutsideCdE(_) => "InfeasibleOutsideCdE",
            Error::SeparationFailure(_) => "SeparationFailure",
            Error::Config { .. } => "ConfigError",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
