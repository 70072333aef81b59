use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("unknown backbone `{0}`")]
    UnknownBackbone(String),

    #[error("projection `{projection}` is not present in backbone `{backbone}`")]
    MissingProjection { backbone: String, projection: String },

    #[error("invalid config: {field}: {message}")]
    Config { field: String, message: String },

    #[error("{path}: row {row}: {message}")]
    Manifest {
        path: PathBuf,
        row: usize,
        message: String,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("task mismatch: {0}")]
    TaskMismatch(String),

    #[error("unknown dataset `{0}`")]
    UnknownDataset(String),

    #[error("duplicate dataset `{0}`")]
    DuplicateDataset(String),

    #[error("invalid head {layer}/{head}: model has {layers} layers with {heads} heads each")]
    InvalidHead {
        layer: usize,
        head: usize,
        layers: usize,
        heads: usize,
    },

    #[error("data: {0}")]
    Data(String),

    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

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

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),

    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 1 usage/config, 2 data, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::UnknownBackbone(_)
            | Error::MissingProjection { .. }
            | Error::Config { .. }
            | Error::TomlDe(_)
            | Error::TomlSer(_)
            | Error::InvalidHead { .. }
            | Error::DuplicateDataset(_)
            | Error::UnknownDataset(_) => 1,
            Error::Numerical(_) => 3,
            _ => 2,
        }
    }
}
