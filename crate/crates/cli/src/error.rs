use std::path::PathBuf;

use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Core {
        context: String,
        #[source]
        source: stsn::Error,
    },
}

#[derive(Serialize)]
struct ErrorReport<'a> {
    category: &'a str,
    message: String,
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn category(&self) -> &'static str {
        use stsn::Error as E;
        match self {
            CliError::Usage(_) => "usage",
            CliError::Io { .. } => "io",
            CliError::Core { source, .. } => match source {
                E::Io(_) => "io",
                E::Config(_) | E::HeadSplit { .. } => "config",
                E::Codec(_)
                | E::Parse { .. }
                | E::Validation { .. }
                | E::UnknownLabel { .. }
                | E::SentenceMismatch(_)
                | E::SpanBounds { .. }
                | E::WidthOverflow { .. }
                | E::Alignment { .. }
                | E::Json(_) => "data",
                E::VocabularyMismatch(_) => "vocabulary",
                E::VersionMismatch { .. } | E::CorruptCheckpoint(_) => "checkpoint",
                E::Unsupported(_) => "unsupported",
                E::NonFiniteLoss { .. } => "numeric",
                E::Shape { .. } | E::LabelIndex { .. } => "internal",
            },
        }
    }

    /// 2 for problems with the invocation or its inputs, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self.category() {
            "numeric" | "internal" => 1,
            _ => 2,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&ErrorReport {
            category: self.category(),
            message: self.to_string(),
        })
        .expect("error report serializes")
    }
}

/// Attaches a short description of what was being done to core errors.
pub trait Context<T> {
    fn context(self, what: impl FnOnce() -> String) -> Result<T, CliError>;
}

impl<T> Context<T> for stsn::Result<T> {
    fn context(self, what: impl FnOnce() -> String) -> Result<T, CliError> {
        self.map_err(|source| CliError::Core { context: what(), source })
    }
}
