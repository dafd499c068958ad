use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A tensor extent did not match what an operator requires.
    #[error("{op}: dimension mismatch on axis `{axis}`: expected {expected}, got {got}")]
    Dimension {
        op: &'static str,
        axis: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("{op}: {msg}")]
    Shape { op: &'static str, msg: String },

    #[error("max_pool2d: {axis} extent {extent} is odd; pad the input to an even size first")]
    OddPoolExtent { axis: &'static str, extent: usize },

    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("optimizer: parameter `{0}` has no gradient")]
    MissingGrad(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("annotation {index} at ({x}, {y}) lies outside the {width}x{height} image")]
    PointOutOfBounds {
        index: usize,
        x: f64,
        y: f64,
        width: usize,
        height: usize,
    },

    #[error("{0} must not be empty")]
    Empty(&'static str),

    #[error("inpaint: every pixel is masked; no boundary information to fill from")]
    FullyMasked,

    #[error("augment: scale {scale} outside configured range [{lo}, {hi}]")]
    ScaleOutOfRange { scale: f64, lo: f64, hi: f64 },

    #[error(
        "compose: could not place {wanted} cells (placed {placed}) after {attempts} attempts; lower the density or the minimum distance"
    )]
    Placement {
        wanted: usize,
        placed: usize,
        attempts: usize,
    },

    #[error("checkpoint: {msg} at byte offset {offset}")]
    Checkpoint { offset: usize, msg: String },

    #[error("checkpoint partition: {0}")]
    Partition(String),

    #[error("stage order: cannot move from `{from}` to `{to}`")]
    StageOrder { from: String, to: String },

    #[error("{path}: line {line}: {msg}")]
    Csv {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("missing annotation file for image `{0}`")]
    MissingAnnotation(String),

    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("invalid domain spec: {0}")]
    DomainSpec(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Shape {
            op,
            msg: msg.into(),
        }
    }
}
