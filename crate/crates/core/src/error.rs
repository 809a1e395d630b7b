use thiserror::Error;

/// Unified error type for the whole crate.
///
/// Every fallible operation distinguishes configuration problems, shape
/// mismatches, violated call contracts, malformed files (with the byte
/// offset where parsing stopped) and plain IO failures.
#[derive(Debug, Error)]
pub enum Error {
    #[error("config: {0}")]
    Config(String),

    #[error("shape: {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("contract: {0}")]
    Contract(String),

    #[error("format: {path}: {detail} (byte offset {offset})")]
    Format {
        path: String,
        offset: u64,
        detail: String,
    },

    #[error("io: {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("pretraining stopped below target held-out accuracy {target}: achieved {achieved}")]
    PretrainTarget { target: f64, achieved: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
