use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("solver: {0}")]
    Solver(#[from] homoglab::Error),
    #[error("io: {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("artifact: {0}")]
    Artifact(String),
    /// Some study rows failed; the report was still written.
    #[error("partial study: {0}")]
    Partial(String),
}

impl HarnessError {
    pub fn config(e: impl std::fmt::Display) -> Self {
        HarnessError::Config(e.to_string())
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            HarnessError::Usage(_) => "usage",
            HarnessError::Config(_) => "config",
            HarnessError::Solver(_) => "solver",
            HarnessError::Io { .. } => "io",
            HarnessError::Artifact(_) => "artifact",
            HarnessError::Partial(_) => "partial",
        }
    }

    /// 1 usage, 2 config or artifact contents, 3 solver, 4 I/O.
    pub fn exit_code(&self) -> u8 {
        match self {
            HarnessError::Usage(_) => 1,
            HarnessError::Config(_) | HarnessError::Artifact(_) => 2,
            HarnessError::Solver(_) | HarnessError::Partial(_) => 3,
            HarnessError::Io { .. } => 4,
        }
    }

    /// One line, `key=value` fields, message last.
    pub fn machine_line(&self) -> String {
        let msg = self.to_string().replace(['\n', '\r'], " ");
        format!("error kind={} code={} message={msg}", self.kind(), self.exit_code())
    }
}
