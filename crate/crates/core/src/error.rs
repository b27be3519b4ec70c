use std::path::PathBuf;

/// Errors raised by the reconstruction library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("camera id {id} out of range ({count} cameras)")]
    CameraOutOfRange { id: usize, count: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("pose validity: camera {id}: {message}")]
    Pose { id: usize, message: String },

    #[error("checkpoint framing: {0}")]
    Framing(String),

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("config: {0}")]
    Config(String),

    #[error("schedule: {0}")]
    Schedule(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("visual hull: {0}")]
    VisualHull(String),
}

impl Error {
    /// Short machine-parseable tag used by the CLI error prefix.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Contract(_) => "contract",
            Error::Dimension(_) => "dimension",
            Error::CameraOutOfRange { .. } => "camera",
            Error::Io { .. } => "io",
            Error::Image { .. } => "image",
            Error::Dataset(_) => "dataset",
            Error::Pose { .. } => "pose",
            Error::Framing(_) => "framing",
            Error::Version { .. } => "version",
            Error::Config(_) => "config",
            Error::Schedule(_) => "schedule",
            Error::Empty(_) => "empty",
            Error::VisualHull(_) => "visual-hull",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
