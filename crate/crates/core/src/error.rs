use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch { what: &'static str, expected: usize, got: usize },

    #[error("associativity violated at basis triple {triple:?} (residual {residual:e})")]
    AssociativityViolation { triple: (usize, usize, usize), residual: f64 },

    #[error("no multiplicative unit (best candidate residual {residual:e})")]
    MissingUnit { residual: f64 },

    #[error("declared unit fails the unit axiom at basis element {index} (residual {residual:e})")]
    UnitViolation { index: usize, residual: f64 },

    #[error("bimodule axiom '{axiom}' violated (residual {residual:e})")]
    ModuleViolation { axiom: &'static str, residual: f64 },

    #[error("invalid algebra spec: {0}")]
    InvalidSpec(String),

    #[error("unsupported norm: {0}")]
    UnsupportedNorm(String),

    #[error("numerical rank is ambiguous; singular spectrum {spectrum:?}")]
    RankUncertain { spectrum: Vec<f64> },

    #[error("invalid perturbation model: {0}")]
    InvalidModel(String),

    #[error("iteration did not converge after {iterations} steps (last movement {movement:e})")]
    NoConvergence { iterations: usize, movement: f64 },

    #[error("iterate norm {norm:e} overflowed at step {iteration}")]
    Overflow { iteration: usize, norm: f64 },

    #[error("control series diverges (last partial sum {})", partial_sums.last().copied().unwrap_or(f64::NAN))]
    DivergentSeries { partial_sums: Vec<f64> },

    #[error("invalid experiment config: {0}")]
    InvalidConfig(String),

    #[error("stage '{stage}' failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn at_stage(self, stage: impl Into<String>) -> Error {
        Error::Stage { stage: stage.into(), source: Box::new(self) }
    }

    /// Short machine-readable tag, used in reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::DimensionMismatch { .. } => "DimensionMismatch",
            Error::AssociativityViolation { .. } => "AssociativityViolation",
            Error::MissingUnit { .. } => "MissingUnit",
            Error::UnitViolation { .. } => "UnitViolation",
            Error::ModuleViolation { .. } => "ModuleViolation",
            Error::InvalidSpec(_) => "InvalidSpec",
            Error::UnsupportedNorm(_) => "UnsupportedNorm",
            Error::RankUncertain { .. } => "RankUncertain",
            Error::InvalidModel(_) => "InvalidModel",
            Error::NoConvergence { .. } => "NoConvergence",
            Error::Overflow { .. } => "Overflow",
            Error::DivergentSeries { .. } => "DivergentSeries",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::Stage { source, .. } => source.kind(),
            Error::Io(_) => "Io",
            Error::Json(_) => "Json",
            Error::Csv(_) => "Csv",
        }
    }
}
