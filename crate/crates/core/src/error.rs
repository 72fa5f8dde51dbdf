use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("{field} index {index} is out of vocabulary (size {vocab})")]
    OutOfVocab {
        field: &'static str,
        index: usize,
        vocab: usize,
    },

    #[error("teacher {teacher}: expected width {expected}, got {got}")]
    TeacherWidth {
        teacher: usize,
        expected: usize,
        got: usize,
    },

    #[error("injection at layer {layer}: expected width {expected}, got {got}")]
    InjectionWidth {
        layer: usize,
        expected: usize,
        got: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{0}")]
    Precondition(String),

    #[error("training diverged ({context}): non-finite loss at epoch {epoch}, step {step}")]
    Divergence {
        context: String,
        epoch: usize,
        step: usize,
    },

    #[error("frozen parameter `{0}` received a nonzero gradient")]
    FrozenGradient(String),

    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// True for errors caused by non-finite numerics rather than bad input.
    pub fn is_divergence(&self) -> bool {
        matches!(self, Error::Divergence { .. })
    }
}
