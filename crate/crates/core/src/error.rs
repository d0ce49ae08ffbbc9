use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("shape mismatch: {left} vs {right}")]
    Shape { left: String, right: String },

    #[error("detector protocol error at record {index:?}: {message}")]
    Protocol {
        index: Option<usize>,
        message: String,
    },

    #[error("detector transport error: {0}")]
    Transport(String),

    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("generation error: {0}")]
    Generation(String),

    #[error("point ({x}, {y}) lies outside the {width}x{height} image")]
    PointOutOfBounds {
        x: f64,
        y: f64,
        width: usize,
        height: usize,
    },

    #[error("no positive exemplar candidates for image {image_id}")]
    NoPositives { image_id: String },

    #[error("non-finite loss on image {image_id}: l_c={l_c}, l_d={l_d}")]
    NonFiniteLoss { image_id: String, l_c: f64, l_d: f64 },

    #[error("i/o error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn shape(left: impl std::fmt::Debug, right: impl std::fmt::Debug) -> Self {
        Error::Shape {
            left: format!("{left:?}"),
            right: format!("{right:?}"),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn protocol(index: Option<usize>, message: impl Into<String>) -> Self {
        Error::Protocol {
            index,
            message: message.into(),
        }
    }
}
