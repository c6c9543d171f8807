use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),

    #[error("backend call failed: {0}")]
    Backend(String),

    #[error("text must be non-empty")]
    EmptyText,

    #[error("invalid prompt: {0}")]
    InvalidPrompt(String),

    #[error("gallery at {0} contains no category with images")]
    EmptyGallery(PathBuf),

    #[error("unknown category `{0}`")]
    UnknownCategory(String),

    #[error("no `{category}` object found in {image}")]
    NoObjectFound { category: String, image: String },

    #[error("scale {scale} turns a {width}x{height} object into fewer than 4 pixels")]
    DegenerateScale { scale: f64, width: u32, height: u32 },

    #[error("paste of {paste_w}x{paste_h} does not fit into a {base_w}x{base_h} base image")]
    PasteTooLarge {
        paste_w: u32,
        paste_h: u32,
        base_w: u32,
        base_h: u32,
    },

    #[error("placement out of bounds: {0}")]
    OutOfBounds(String),

    #[error("malformed annotation in {path}: {message}")]
    MalformedAnnotation { path: PathBuf, message: String },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("dimension mismatch: {left:?} vs {right:?}")]
    DimensionMismatch { left: (u32, u32), right: (u32, u32) },

    #[error("no ground-truth boxes in any image, mAP is undefined")]
    NoGroundTruth,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("layout mismatch: {0}")]
    LayoutMismatch(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("I/O error at {path}: {source}")]
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
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn image(path: impl Into<PathBuf>, source: image::ImageError) -> Self {
        Error::Image {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn malformed(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::MalformedAnnotation {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::EmptyGallery(_)
            | Error::LayoutMismatch(_)
            | Error::UnknownCategory(_)
            | Error::InvalidInput(_) => 2,
            Error::Io { .. } | Error::Image { .. } | Error::MalformedAnnotation { .. } => 3,
            Error::BackendUnavailable(_) | Error::Backend(_) => 4,
            _ => 1,
        }
    }
}
