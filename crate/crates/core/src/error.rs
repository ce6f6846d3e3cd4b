use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid mask spec: {0}")]
    InvalidSpec(String),

    #[error("invalid mask schedule: {0}")]
    InvalidSchedule(String),

    #[error("invalid tiling: {0}")]
    InvalidStride(String),

    #[error("sources have mixed sizes: {0}")]
    HeterogeneousInput(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("invalid normalization stats: {0}")]
    InvalidStats(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("model does not satisfy the segmentation contract: {0}")]
    ContractViolation(String),

    #[error("invalid class count {0}, must be at least 1")]
    InvalidClassCount(usize),

    #[error("refusing to save non-finite parameter `{0}`")]
    CorruptState(String),

    #[error("checkpoint shares no parameter names with the target model")]
    IncompatibleCheckpoint,

    #[error("parameter `{name}` has shape {found:?} in checkpoint but {expected:?} in model")]
    ParameterShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("record {0} has no label but the step is supervised")]
    MissingLabel(String),

    #[error("label class {class} out of range for {num_classes} classes")]
    LabelDomain { class: u8, num_classes: usize },

    #[error("non-finite loss at epoch {epoch}, batch {batch} (mask seed {mask_seed:#018x})")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        mask_seed: u64,
    },

    #[error("missing checkpoint {0}")]
    MissingCheckpoint(PathBuf),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("png error on {path}: {reason}")]
    Png { path: PathBuf, reason: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
