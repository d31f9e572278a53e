use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("timestep {t} out of range for a schedule of {num_timesteps} steps")]
    TimestepOutOfRange { t: i64, num_timesteps: usize },

    #[error("signal level is zero at timestep {0}; cannot recover x0 from an epsilon prediction")]
    SingularConversion(i64),

    #[error("unknown condition token {token} (vocabulary size {vocab})")]
    UnknownCondition { token: u32, vocab: usize },

    #[error("flow index {index} is not registered ({registered} flows)")]
    UnregisteredFlow { index: usize, registered: usize },

    #[error("flow index mismatch: rank {rank} runs base {base} but its batch belongs to {batch}")]
    FlowMismatch { rank: usize, base: usize, batch: String },

    #[error("loss must be a scalar, got a {rows}x{cols} value")]
    NonScalarLoss { rows: usize, cols: usize },

    #[error("non-finite loss at stage {stage}, iteration {iteration}: {detail}")]
    NonFiniteLoss {
        stage: usize,
        iteration: usize,
        detail: String,
        dump: Option<PathBuf>,
    },

    #[error("parameter set mismatch: {0}")]
    ParameterMismatch(String),

    #[error("missing checkpoint entry `{0}`")]
    MissingEntry(String),

    #[error("corrupt file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    #[error("config: {0}")]
    Config(String),

    #[error("config hash mismatch: artifact {artifact} was produced by {found}, current config is {expected}")]
    ConfigHashMismatch {
        artifact: PathBuf,
        expected: String,
        found: String,
    },

    #[error("missing artifact {0}")]
    MissingArtifact(PathBuf),

    #[error("stage plan: {0}")]
    Plan(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("reduction: {0}")]
    Reduction(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(expected: impl ToString, got: impl ToString) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
