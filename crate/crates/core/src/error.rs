use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid box: {0}")]
    InvalidBox(String),

    #[error("invalid image record: {0}")]
    InvalidImage(String),

    #[error("invalid parameter {name}: {value} ({reason})")]
    InvalidParam {
        name: &'static str,
        value: f64,
        reason: &'static str,
    },

    #[error("staircase length must be positive, got {0}")]
    NonPositiveLength(f64),

    #[error("grid dimensions differ: {0}")]
    DimensionMismatch(String),

    #[error("empty region: no mass under the mask")]
    EmptyRegion,

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("unknown image id {0}")]
    UnknownImage(u64),

    #[error("unknown category id {category_id} on image {image_id}")]
    UnknownCategory { image_id: u64, category_id: u32 },

    #[error("image {image_id}: point ({x}, {y}) lies outside the image")]
    PointOutOfBounds { image_id: u64, x: f64, y: f64 },

    #[error("image {image_id}: duplicate instance id {instance_id}")]
    DuplicateInstance { image_id: u64, instance_id: u64 },

    #[error("no box size available for category {0}")]
    NoSizeReference(u32),

    #[error("could only place {placed} of {requested} instances without overlap")]
    Placement { placed: usize, requested: usize },

    #[error("{path}: at `{field}`: {source}")]
    Json {
        path: PathBuf,
        field: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("{path}: {message}")]
    Invalid { path: PathBuf, message: String },

    #[error("{path}:{line}: {message}")]
    ParamsFormat {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
