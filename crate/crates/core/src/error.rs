use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Position of an offending value inside a panel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Location {
    pub cluster: String,
    pub unit: Option<String>,
    /// One-based occasion index.
    pub occasion: Option<usize>,
}

impl std::fmt::Display for Location {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "cluster {}", self.cluster)?;
        if let Some(unit) = &self.unit {
            write!(f, ", unit {unit}")?;
        }
        if let Some(t) = self.occasion {
            write!(f, ", occasion {t}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model specification: {0}")]
    InvalidSpec(String),

    #[error("invalid parameters: {0}")]
    InvalidParameters(String),

    #[error("invalid dataset at {location}: {message}")]
    InvalidData { location: Location, message: String },

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("unknown covariate '{name}' ({level} level)")]
    UnknownCovariate { name: String, level: &'static str },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("zero likelihood for cluster {cluster}, pair ({unit_a}, {unit_b}) at occasion {occasion}")]
    ZeroLikelihood {
        cluster: usize,
        unit_a: usize,
        unit_b: usize,
        /// One-based occasion index.
        occasion: usize,
    },

    #[error("zero likelihood at occasion {occasion}")]
    ZeroEmission { occasion: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("singular weighted normal equations; deficient columns: {}", columns.join(", "))]
    SingularDesign { columns: Vec<String> },

    #[error("information matrix numerically singular (reciprocal condition {rcond:.3e})")]
    SingularInformation { rcond: f64 },

    #[error("information matrix not positive definite (smallest eigenvalue {min_eigenvalue:.3e}): not a local maximum")]
    NotAMaximum { min_eigenvalue: f64 },

    #[error("not supported: {0}")]
    Unsupported(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Stable machine-readable code, used in CLI error records.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidSpec(_) => "E_SPEC",
            Error::InvalidParameters(_) => "E_PARAMS",
            Error::InvalidData { .. } | Error::InvalidDataset(_) => "E_DATA",
            Error::UnknownCovariate { .. } => "E_COVARIATE",
            Error::Parse { .. } => "E_PARSE",
            Error::ZeroLikelihood { .. } | Error::ZeroEmission { .. } => "E_ZERO_LIKELIHOOD",
            Error::Dimension(_) => "E_DIMENSION",
            Error::SingularDesign { .. } => "E_SINGULAR_DESIGN",
            Error::SingularInformation { .. } => "E_SINGULAR_INFORMATION",
            Error::NotAMaximum { .. } => "E_NOT_MAXIMUM",
            Error::Unsupported(_) => "E_UNSUPPORTED",
            Error::Config(_) => "E_CONFIG",
            Error::Io(_) => "E_IO",
            Error::Json(_) => "E_JSON",
            Error::Csv(_) => "E_CSV",
        }
    }

    pub(crate) fn data(
        cluster: &str,
        unit: Option<&str>,
        occasion: Option<usize>,
        message: impl Into<String>,
    ) -> Self {
        Error::InvalidData {
            location: Location {
                cluster: cluster.to_string(),
                unit: unit.map(str::to_string),
                occasion,
            },
            message: message.into(),
        }
    }
}
