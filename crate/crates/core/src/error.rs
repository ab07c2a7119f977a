use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Where in a run a numeric failure happened.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NumericContext {
    pub repeat: Option<usize>,
    pub round: Option<usize>,
    pub client: Option<usize>,
    pub step: Option<usize>,
}

impl std::fmt::Display for NumericContext {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mut parts = Vec::new();
        if let Some(r) = self.repeat {
            parts.push(format!("repeat {r}"));
        }
        if let Some(r) = self.round {
            parts.push(format!("round {r}"));
        }
        if let Some(c) = self.client {
            parts.push(format!("client {c}"));
        }
        if let Some(s) = self.step {
            parts.push(format!("step {s}"));
        }
        if parts.is_empty() {
            f.write_str("<no context>")
        } else {
            f.write_str(&parts.join(", "))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IdxErrorKind {
    WrongMagic { expected: u32, found: u32 },
    Truncated { needed: usize, available: usize },
    BadDimensions,
    LabelOutOfRange(u8),
}

impl std::fmt::Display for IdxErrorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            IdxErrorKind::WrongMagic { expected, found } => {
                write!(f, "wrong magic: expected {expected:#010x}, found {found:#010x}")
            }
            IdxErrorKind::Truncated { needed, available } => {
                write!(f, "truncated payload: need {needed} bytes, {available} available")
            }
            IdxErrorKind::BadDimensions => f.write_str("unexpected image dimensions"),
            IdxErrorKind::LabelOutOfRange(l) => write!(f, "label {l} out of range [0,9]"),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("config error at `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("{} config errors:{}", .0.len(), .0.iter().map(|(f, m)| format!("\n  `{f}`: {m}")).collect::<String>())]
    ConfigList(Vec<(String, String)>),

    #[error("numeric error ({context}): {message}")]
    Numeric { context: NumericContext, message: String },

    #[error("{}: {kind} at offset {offset}", path.display())]
    Idx { path: PathBuf, offset: usize, kind: IdxErrorKind },

    #[error("image/label count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("round abandoned: {0}")]
    RoundAbandoned(String),

    #[error("plot error: {0}")]
    Plot(String),

    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config { field: field.into(), message: message.into() }
    }

    pub fn numeric(context: NumericContext, message: impl Into<String>) -> Self {
        Error::Numeric { context, message: message.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Attach run coordinates to a numeric error raised deeper in the stack.
    pub fn with_context(self, f: impl FnOnce(&mut NumericContext)) -> Self {
        match self {
            Error::Numeric { mut context, message } => {
                f(&mut context);
                Error::Numeric { context, message }
            }
            other => other,
        }
    }

    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config { .. } | Error::ConfigList(_))
    }
}
