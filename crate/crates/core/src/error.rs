use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("point {0:?} lies outside the domain")]
    OutsideDomain(Vec<f64>),

    #[error("CFL number {cfl:.4} exceeds the limit {limit} at t = {time} s")]
    Cfl { cfl: f64, limit: f64, time: f64 },

    #[error("PCG stalled at relative residual {residual:.3e} after {iterations} iterations")]
    PcgNotConverged { iterations: usize, residual: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("nonpositive temperature {0} K")]
    NonPositiveTemperature(f64),

    #[error("training needs at least 2 snapshots, got {0}")]
    TooFewSnapshots(usize),

    #[error("invalid value for `{field}`: {reason}")]
    Invalid { field: String, reason: String },

    #[error("config: {0}")]
    Config(String),

    #[error("file format: {0}")]
    Format(String),

    #[error("missing ground truth: {0}")]
    MissingGroundTruth(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(field: &str, reason: impl Into<String>) -> Self {
        Error::Invalid {
            field: field.to_string(),
            reason: reason.into(),
        }
    }
}
