use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("timing error: {0}")]
    Timing(String),

    #[error("unresolved reference at {path}: {name}")]
    Reference { path: String, name: String },

    #[error("configuration has {} error(s): {}", .0.len(), summarize(.0))]
    Config(Vec<ConfigIssue>),

    #[error("cannot write output to {path}: {source}")]
    Output {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit status for the CLI; each error class gets its own code.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Parameter(_) | Error::Parse(_) | Error::Json(_) => 2,
            Error::Reference { .. } => 3,
            Error::Timing(_) => 4,
            Error::Output { .. } | Error::Io(_) => 5,
            Error::Config(issues) => {
                if issues.iter().any(|i| i.kind == IssueKind::Reference) {
                    3
                } else if issues.iter().any(|i| i.kind == IssueKind::Timing) {
                    4
                } else {
                    2
                }
            }
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn param<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Parameter(msg.into()))
}

/// Category of a configuration problem, used to pick the error class a run reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum IssueKind {
    Structure,
    Reference,
    Timing,
    Value,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct ConfigIssue {
    pub path: String,
    pub kind: IssueKind,
    pub message: String,
}

impl std::fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

fn summarize(issues: &[ConfigIssue]) -> String {
    issues
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}
