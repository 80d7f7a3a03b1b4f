use std::fmt;

use riskplan_core::embedding::EmbeddingError;
use riskplan_core::evaluation::EvalError;
use riskplan_core::model::ModelError;
use riskplan_core::scenario::ScenarioError;
use riskplan_core::training::TrainError;

/// Failure classes, each with its own exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Runtime,
    Usage,
    MissingArtifact,
    Config,
    OutputExists,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Runtime => 1,
            ErrorKind::Usage => 2,
            ErrorKind::MissingArtifact => 3,
            ErrorKind::Config => 4,
            ErrorKind::OutputExists => 5,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorKind::Runtime => "runtime",
            ErrorKind::Usage => "usage",
            ErrorKind::MissingArtifact => "missing_artifact",
            ErrorKind::Config => "config",
            ErrorKind::OutputExists => "output_exists",
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

impl CliError {
    pub fn new(kind: ErrorKind, message: impl Into<String>) -> Self {
        CliError {
            kind,
            message: message.into(),
        }
    }

    pub fn runtime(m: impl Into<String>) -> Self {
        CliError::new(ErrorKind::Runtime, m)
    }

    pub fn missing(m: impl Into<String>) -> Self {
        CliError::new(ErrorKind::MissingArtifact, m)
    }

    pub fn config(m: impl Into<String>) -> Self {
        CliError::new(ErrorKind::Config, m)
    }

    /// One-line JSON for stderr.
    pub fn to_json_line(&self, command: &str) -> String {
        serde_json::json!({
            "error": self.kind.as_str(),
            "exit_code": self.kind.exit_code(),
            "command": command,
            "message": self.message.replace('\n', " "),
        })
        .to_string()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.kind.as_str(), self.message)
    }
}

fn not_found(e: &std::io::Error) -> bool {
    e.kind() == std::io::ErrorKind::NotFound
}

impl From<ScenarioError> for CliError {
    fn from(e: ScenarioError) -> Self {
        let kind = match &e {
            ScenarioError::MissingManifest(_) => ErrorKind::MissingArtifact,
            ScenarioError::Io { source, .. } if not_found(source) => ErrorKind::MissingArtifact,
            ScenarioError::InvalidRatios(_) | ScenarioError::TooFewRecords(_) => ErrorKind::Config,
            _ => ErrorKind::Runtime,
        };
        CliError::new(kind, e.to_string())
    }
}

impl From<EmbeddingError> for CliError {
    fn from(e: EmbeddingError) -> Self {
        let kind = match &e {
            EmbeddingError::Io { source, .. } if not_found(source) => ErrorKind::MissingArtifact,
            _ => ErrorKind::Runtime,
        };
        CliError::new(kind, e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        let kind = match &e {
            ModelError::Config(_) => ErrorKind::Config,
            ModelError::Io { source, .. } if not_found(source) => ErrorKind::MissingArtifact,
            _ => ErrorKind::Runtime,
        };
        CliError::new(kind, e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Scenario(s) => s.into(),
            TrainError::Embedding(s) => s.into(),
            TrainError::Model(s) => s.into(),
            TrainError::Config(_) => CliError::config(e.to_string()),
            TrainError::MissingEmbeddings { .. } => CliError::missing(e.to_string()),
            other => CliError::runtime(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Scenario(s) => s.into(),
            EvalError::Embedding(s) => s.into(),
            EvalError::Model(s) => s.into(),
            EvalError::MissingEmbeddings { .. } => CliError::missing(e.to_string()),
            EvalError::Io { ref source, .. } if not_found(source) => CliError::missing(e.to_string()),
            other => CliError::runtime(other.to_string()),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
