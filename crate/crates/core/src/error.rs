use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("missing artifact {path}: {hint}")]
    MissingArtifact { path: PathBuf, hint: String },

    #[error("failed to parse {path}: {msg}")]
    Parse { path: PathBuf, msg: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, msg: impl ToString) -> Self {
        Error::Parse {
            path: path.into(),
            msg: msg.to_string(),
        }
    }

    /// Wraps the error with the name of the pipeline stage that produced it.
    pub fn in_stage(self, stage: impl Into<String>) -> Self {
        Error::Stage {
            stage: stage.into(),
            source: Box::new(self),
        }
    }

    /// Process exit code for the CLI: 1 usage/config, 2 data, 3 internal.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Usage(_) => 1,
            Error::Shape(_) | Error::Data(_) | Error::MissingArtifact { .. } | Error::Parse { .. } => 2,
            Error::Io { .. } => 3,
            Error::Stage { source, .. } => source.exit_code(),
        }
    }
}

macro_rules! ensure {
    ($cond:expr, $variant:ident, $($arg:tt)+) => {
        let holds: bool = $cond;
        if !holds {
            return Err($crate::error::Error::$variant(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(Error::Config("x".into()).exit_code(), 1);
        assert_eq!(Error::Usage("x".into()).exit_code(), 1);
        assert_eq!(Error::Data("x".into()).exit_code(), 2);
        let io = Error::io("/nope", std::io::Error::other("boom"));
        assert_eq!(io.exit_code(), 3);
        assert_eq!(Error::Data("x".into()).in_stage("server").exit_code(), 2);
    }
}
