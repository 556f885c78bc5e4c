use thiserror::Error;

/// Errors surfaced by schema validation, masking, model forward passes,
/// training loops, dataset ingestion and checkpoint IO.
#[derive(Debug, Error)]
pub enum Error {
    #[error("duplicate category label {label:?} in feature {feature:?}")]
    DuplicateCategory { feature: String, label: String },
    #[error("schema declares no features")]
    EmptyFeatureSet,
    #[error("invalid range for numerical feature {feature:?}: min {min} must be < max {max}")]
    InvalidRange { feature: String, min: f64, max: f64 },
    #[error("masking probability {0} outside [0,1]")]
    InvalidProbability(f64),
    #[error("feature index {index} out of range (limit {limit})")]
    IndexOutOfRange { index: usize, limit: usize },
    #[error("non-finite value {0}")]
    NonFiniteValue(f64),
    #[error("condition vector does not match schema: {0}")]
    SchemaMismatch(String),
    #[error("schedule step {t} outside [0, {total}]")]
    StepOutOfRange { t: u64, total: u64 },
    #[error("non-finite model input")]
    NonFiniteInput,
    #[error("non-finite loss at gradient update {step}")]
    DivergenceDetected { step: u64 },
    #[error("invalid noise schedule bounds: beta_min {beta_min}, beta_max {beta_max}")]
    InvalidScheduleBounds { beta_min: f64, beta_max: f64 },
    #[error("timestep {t} outside [1, {total}]")]
    TimestepOutOfRange { t: usize, total: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("unknown category label {label:?} for column {column:?} at row {row}")]
    UnknownCategoryLabel { row: usize, column: String, label: String },
    #[error("missing column {0:?}")]
    MissingColumn(String),
    #[error("malformed number {value:?} for column {column:?} at row {row}")]
    MalformedNumber { row: usize, column: String, value: String },
    #[error("split would leave an empty train or test set (n = {n}, test fraction = {fraction})")]
    EmptySplit { n: usize, fraction: f64 },
    #[error("requested subsample size {requested} exceeds dataset size {available}")]
    SizeTooLarge { requested: usize, available: usize },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("incompatible checkpoint: {0}")]
    IncompatibleVersion(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("image error: {0}")]
    Image(String),
}

pub type Result<T> = std::result::Result<T, Error>;
