//! Harness-level errors, partitioned into the categories the CLI maps to
//! exit codes: configuration, divergence, and IO.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("run diverged at iteration {iteration}: {detail}")]
    Diverged { iteration: usize, detail: String },
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

impl HarnessError {
    pub fn io(path: impl Into<String>) -> impl FnOnce(std::io::Error) -> HarnessError {
        let path = path.into();
        move |source| HarnessError::Io { path, source }
    }

    /// Process exit code category: 2 config, 3 divergence, 4 io/schema.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Diverged { .. } => 3,
            HarnessError::SchemaMismatch(_) | HarnessError::Io { .. } => 4,
        }
    }
}

impl From<cory_core::tasks::TaskError> for HarnessError {
    fn from(e: cory_core::tasks::TaskError) -> Self {
        match e {
            cory_core::tasks::TaskError::Io(io) => HarnessError::Io {
                path: "<corpus>".into(),
                source: io,
            },
            other => HarnessError::Config(other.to_string()),
        }
    }
}
