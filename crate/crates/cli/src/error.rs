use std::path::PathBuf;

use serde::Serialize;

/// Exit code for configuration and input validation failures.
pub const EXIT_VALIDATION: i32 = 2;
/// Exit code for failures while a stage runs.
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{message}")]
    Validation {
        message: String,
        path: Option<PathBuf>,
        stage: Option<String>,
    },
    #[error("stage {stage}: {source}")]
    Runtime {
        stage: String,
        #[source]
        source: fclust_core::Error,
    },
    #[error("stage {stage}: {message}")]
    Failed { stage: String, message: String },
}

#[derive(Serialize)]
struct Diagnostic<'a> {
    level: &'static str,
    kind: &'static str,
    message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    stage: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    path: Option<String>,
}

impl CliError {
    pub fn validation(message: impl Into<String>) -> Self {
        CliError::Validation {
            message: message.into(),
            path: None,
            stage: None,
        }
    }

    pub fn missing_path(path: impl Into<PathBuf>, stage: Option<&str>) -> Self {
        let path = path.into();
        CliError::Validation {
            message: format!("referenced file does not exist: {}", path.display()),
            path: Some(path),
            stage: stage.map(str::to_owned),
        }
    }

    /// Wraps a core error raised by `stage`; configuration errors count as
    /// validation failures.
    pub fn from_core(stage: &str, source: fclust_core::Error) -> Self {
        match source {
            fclust_core::Error::InvalidConfig(message) => CliError::Validation {
                message,
                path: None,
                stage: Some(stage.to_owned()),
            },
            source => CliError::Runtime {
                stage: stage.to_owned(),
                source,
            },
        }
    }

    pub fn failed(stage: &str, message: impl Into<String>) -> Self {
        CliError::Failed {
            stage: stage.to_owned(),
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation { .. } => EXIT_VALIDATION,
            CliError::Runtime { .. } | CliError::Failed { .. } => EXIT_RUNTIME,
        }
    }

    /// One-line JSON diagnostic for standard error.
    pub fn diagnostic(&self) -> String {
        let d = match self {
            CliError::Validation { message, path, stage } => Diagnostic {
                level: "error",
                kind: "validation",
                message: message.clone(),
                stage: stage.as_deref(),
                path: path.as_ref().map(|p| p.display().to_string()),
            },
            CliError::Runtime { stage, source } => Diagnostic {
                level: "error",
                kind: "runtime",
                message: source.to_string(),
                stage: Some(stage),
                path: match source {
                    fclust_core::Error::Io { path, .. }
                    | fclust_core::Error::BadMagic(path)
                    | fclust_core::Error::ChecksumMismatch { path }
                    | fclust_core::Error::TruncatedFile { path, .. } => Some(path.display().to_string()),
                    _ => None,
                },
            },
            CliError::Failed { stage, message } => Diagnostic {
                level: "error",
                kind: "runtime",
                message: message.clone(),
                stage: Some(stage),
                path: None,
            },
        };
        serde_json::to_string(&d).unwrap_or_else(|_| self.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
