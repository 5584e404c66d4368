use std::path::PathBuf;

use scenepose_core::environment::EnvironmentError;
use scenepose_core::synthdata::SynthError;
use serde::Serialize;

/// Snapshot written when a training step produces a non-finite loss.
#[derive(Debug, Clone, Serialize)]
pub struct NanDump {
    pub stage: u8,
    pub phase: String,
    pub step: usize,
    /// `(sequence, window start)` of every window in the batch.
    pub windows: Vec<(String, usize)>,
    pub losses: Vec<(String, f64)>,
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("non-finite loss in stage {} ({}) at step {}", .0.stage, .0.phase, .0.step)]
    NonFinite(Box<NanDump>),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid data: {0}")]
    Data(String),
    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

impl PipelineError {
    /// Process exit status for the command line.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::NonFinite(_) => 3,
            PipelineError::Io { .. } => 4,
            PipelineError::Data(_) | PipelineError::Tensor(_) => 1,
        }
    }

    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| PipelineError::Io { path, source }
    }
}

impl From<SynthError> for PipelineError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Io { path, source } => PipelineError::Io { path, source },
            other => PipelineError::Data(other.to_string()),
        }
    }
}

impl From<EnvironmentError> for PipelineError {
    fn from(e: EnvironmentError) -> Self {
        match e {
            EnvironmentError::Io(source) => PipelineError::Io {
                path: PathBuf::from("<environment>"),
                source,
            },
            other => PipelineError::Data(other.to_string()),
        }
    }
}
