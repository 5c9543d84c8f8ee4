//! Crate-wide error type and the process exit codes the CLI maps it to.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("json error at {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("placement ({x}, {y}) out of bounds for {image_id} ({width}x{height}, patch {patch_size})")]
    Placement {
        image_id: String,
        x: u32,
        y: u32,
        width: u32,
        height: u32,
        patch_size: u32,
    },

    #[error("training diverged at step {step}: {msg}")]
    Divergence { step: u64, msg: String },

    #[error("provenance mismatch: {0}")]
    Provenance(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn image(path: impl Into<PathBuf>, source: image::ImageError) -> Self {
        Error::Image {
            path: path.into(),
            source,
        }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    /// Process exit code contract: 0 success, 2 config error, 3 data error,
    /// 4 training divergence, 5 provenance mismatch.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_)
            | Error::Io { .. }
            | Error::Image { .. }
            | Error::Json { .. }
            | Error::Placement { .. } => 3,
            Error::Divergence { .. } => 4,
            Error::Provenance(_) => 5,
        }
    }
}
