use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// One row of a mapping file that references an id missing from its space.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnknownId {
    pub line: usize,
    pub id: u32,
    pub side: &'static str,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{origin}:{line}: {message}")]
    Parse {
        origin: String,
        line: usize,
        message: String,
    },

    #[error("mapping {mapping} references unknown ids: {}", format_unknown(.rows))]
    UnknownIds { mapping: String, rows: Vec<UnknownId> },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("{context}: pixel ({x}, {y}) has invalid value {value}")]
    InvalidPixel {
        context: String,
        x: u32,
        y: u32,
        value: u32,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("strict inversion failed: target ids {ids:?} have several preimages")]
    Collision { ids: Vec<u32> },

    #[error("schedule error: {0}")]
    Schedule(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("predictor failed ({context}): {message}")]
    Predictor { context: String, message: String },

    #[error("no class has a non-zero union")]
    EmptyReport,

    #[error("cross-entropy undefined: no non-ignored pixels")]
    UndefinedLoss,

    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("{}: {source}", .path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn format_unknown(rows: &[UnknownId]) -> String {
    rows.iter()
        .map(|r| format!("line {} {} id {}", r.line, r.side, r.id))
        .collect::<Vec<_>>()
        .join(", ")
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    ///
    /// 2 for malformed inputs, 3 for data errors, 4 for predictor failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Parse { .. }
            | Error::UnknownIds { .. }
            | Error::Argument(_)
            | Error::Config(_)
            | Error::Json(_) => 2,
            Error::Predictor { .. } => 4,
            _ => 3,
        }
    }
}
