use std::path::PathBuf;

/// Failures of the file formats and the command line.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] compt_core::Error),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {detail}", path.display())]
    Parse { path: PathBuf, detail: String },
    #[error("{}: binary sidecar holds {found} values, checkpoint needs {expected}", path.display())]
    Sidecar {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("{0}")]
    Usage(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<PathBuf>, detail: impl ToString) -> Self {
        Self::Parse {
            path: path.into(),
            detail: detail.to_string(),
        }
    }

    /// Stable snake_case name used in machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        use compt_core::Error as C;
        match self {
            Self::Core(e) => match e {
                C::Tensor(_) => "tensor",
                C::Config(_) => "config",
                C::UnknownMethod(_) => "unknown_method",
                C::UnknownTask(_) => "unknown_task",
                C::DuplicateTask(_) => "duplicate_task",
                C::InvalidMask(_) => "invalid_mask",
                C::UniformOutOfRange(_) => "uniform_out_of_range",
                C::PromptTooLong { .. } => "prompt_too_long",
                C::NotEnoughExamples { .. } => "not_enough_examples",
                C::NonFiniteLoss { .. } => "non_finite_loss",
                C::UnmappedLabel(_) => "unmapped_label",
                C::Certification(_) => "certification",
                C::FrozenViolation => "frozen_violation",
                C::CheckpointVersion { .. } => "checkpoint_version",
                C::FingerprintMismatch { .. } => "fingerprint_mismatch",
                C::MalformedCheckpoint(_) => "malformed_checkpoint",
            },
            Self::Io { .. } => "io",
            Self::Parse { .. } => "parse",
            Self::Sidecar { .. } => "sidecar",
            Self::Usage(_) => "usage",
        }
    }

    /// One-line JSON rendering: `{"error":"<kind>","message":"..."}`.
    pub fn to_line(&self) -> String {
        serde_json::json!({ "error": self.kind(), "message": self.to_string() }).to_string()
    }
}
