use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("point is behind the camera (depth {depth})")]
    BehindCamera { depth: f64 },

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("no RANSAC consensus among {rays} rays at {threshold_px} px")]
    NoConsensus { rays: usize, threshold_px: f64 },

    #[error("degenerate problem: {0}")]
    DegenerateProblem(String),

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("ill-posed target set: {active} active targets, {required} required")]
    IllPosed { active: usize, required: usize },

    #[error("lookup failed: {0}")]
    Lookup(String),

    #[error("format error in {path} at byte {offset}: {message}")]
    Format {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    #[error("no pose history available")]
    NoHistory,

    #[error("initialization failed for person {person}: missing keypoints {missing:?}")]
    InitFailure { person: usize, missing: Vec<String> },

    #[error("ambiguous cross-view identity in camera {camera}: candidates {candidates:?}")]
    AmbiguousIdentity { camera: usize, candidates: Vec<usize> },

    #[error("empty evaluation range")]
    EmptyRange,

    #[error("degenerate limb {0}: zero true length")]
    DegenerateLimb(String),

    #[error("invalid configuration at `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &std::path::Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) fn write_json<T: serde::Serialize>(path: &std::path::Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}
