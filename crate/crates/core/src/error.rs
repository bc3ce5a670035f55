use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),

    #[error("truncated file: {len} bytes is not a multiple of the {frame_bytes}-byte frame size")]
    TruncatedFile { len: u64, frame_bytes: usize },

    #[error("missing field `{0}`")]
    MissingField(String),

    #[error("bundle incomplete: missing {0}")]
    BundleIncomplete(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("offset of {offset_ms} ms consumes the whole audio signal")]
    EmptyAudio { offset_ms: f64 },

    #[error("no split rule covers speaker `{speaker}` session `{session}`")]
    Routing { speaker: String, session: String },

    #[error("join error: {0}")]
    Join(String),

    #[error("training diverged at epoch {epoch}, step {step}")]
    TrainingDiverged { epoch: usize, step: usize },

    #[error("utterance `{0}` yields no windows for any candidate offset")]
    Unsyncable(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
