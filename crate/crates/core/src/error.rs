use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("numeric error in {op}: {detail}")]
    Numeric { op: &'static str, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("parse error: {reason} (text: {text:?})")]
    Parse { reason: String, text: String },

    #[error("no object in the scene matches instruction {0:?}")]
    TargetNotFound(String),

    #[error("no collision-free skill exists for object {0:?}")]
    NoFeasibleSkill(String),

    #[error("interpreter unavailable: {0}")]
    InterpreterUnavailable(String),

    #[error("no checkpoint registered for skill {0}")]
    SkillModelMissing(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: loss {loss} (history: {history:?})")]
    Diverged {
        epoch: usize,
        batch: usize,
        loss: f64,
        history: Vec<f64>,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub fn numeric(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Numeric {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable machine-readable tag, used by the CLI's JSON error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::Numeric { .. } => "numeric",
            Error::Config(_) => "config",
            Error::Input(_) => "input",
            Error::Parse { .. } => "parse",
            Error::TargetNotFound(_) => "target_not_found",
            Error::NoFeasibleSkill(_) => "no_feasible_skill",
            Error::InterpreterUnavailable(_) => "interpreter_unavailable",
            Error::SkillModelMissing(_) => "skill_model_missing",
            Error::Diverged { .. } => "diverged",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}
