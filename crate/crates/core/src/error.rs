use alloc::string::String;
use alloc::vec::Vec;

/// Failures raised by tensor construction, tape ops, and `backward`.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} does not hold {len} values")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("rows have different lengths")]
    RaggedRows,
    #[error("{op}: input outside the domain ({detail})")]
    Domain { op: &'static str, detail: String },
    #[error("{op}: axis {axis} invalid for a tensor of rank {rank}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("{op}: index {index} out of range (bound {bound})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward already ran on this tape; record a fresh forward pass")]
    BackwardTwice,
    #[error("finite-difference step {0} outside (1e-8, 1e-3)")]
    BadEpsilon(f64),
    #[error("function is not deterministic: two evaluations at the same point differ")]
    NonDeterministic,
}

/// Crate-wide error type for everything above the tensor layer.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unknown composition method `{0}`")]
    UnknownMethod(String),
    #[error("unknown task `{0}`")]
    UnknownTask(String),
    #[error("duplicate task id `{0}`")]
    DuplicateTask(String),
    #[error("invalid mask: {0}")]
    InvalidMask(String),
    #[error("uniform draw {0} must lie strictly inside (0, 1)")]
    UniformOutOfRange(f64),
    #[error("prompt of {len} rows exceeds the backbone limit of {max}")]
    PromptTooLong { len: usize, max: usize },
    #[error("requested {requested} examples but only {available} are available")]
    NotEnoughExamples { requested: usize, available: usize },
    #[error("non-finite loss at step {step} (task `{task}`, temperature {temperature})")]
    NonFiniteLoss {
        step: usize,
        task: String,
        temperature: f64,
    },
    #[error("label {0} has no mapping")]
    UnmappedLabel(usize),
    #[error("backbone certification failed: {0}")]
    Certification(String),
    #[error("backbone parameters changed while frozen")]
    FrozenViolation,
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },
    #[error("checkpoint was trained on backbone {found}, not {expected}")]
    FingerprintMismatch { expected: String, found: String },
    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
