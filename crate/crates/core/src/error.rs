use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {context} at {location}: {message}")]
    Parse {
        context: String,
        location: String,
        message: String,
    },

    #[error("unsupported PLY property `{name}` of type `{ty}`")]
    UnsupportedProperty { name: String, ty: String },

    #[error("point cloud is empty")]
    EmptyCloud,

    #[error("non-finite coordinates at point indices {0:?}")]
    NonFinite(Vec<usize>),

    #[error("timestamps are not strictly increasing at sample {index} (t = {time})")]
    NonMonotonic { index: usize, time: f64 },

    #[error("query time {query} lies outside the trajectory span [{start}, {end}]")]
    OutOfRange { query: f64, start: f64, end: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("pixel ({u}, {v}) lies outside a {height}x{width} image")]
    PixelOutOfBounds {
        u: f64,
        v: f64,
        height: usize,
        width: usize,
    },

    #[error("cannot decode image {}: {message}", path.display())]
    ImageDecode { path: PathBuf, message: String },

    #[error("no points lie within {max_range} m of the viewpoint")]
    EmptyVisibility { max_range: f64 },

    #[error("motion signal has zero variance")]
    DegenerateSignal,

    #[error("trajectory span {span} s is shorter than required {required} s")]
    SpanTooShort { span: f64, required: f64 },

    #[error("co-visibility graph has no edges")]
    NoCovisibility,

    #[error("texture is constant; photometric alignment would be unobservable")]
    DegenerateTexture,

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(context: impl Into<String>, location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            context: context.into(),
            location: location.into(),
            message: message.into(),
        }
    }
}
