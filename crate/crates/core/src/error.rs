use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("graph error: {0}")]
    Graph(String),
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("render error: {0}")]
    Render(String),
    #[error("non-finite loss term `{term}`: {value}")]
    NonFinite { term: String, value: f64 },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("image error: {0}")]
    Image(String),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Error {
        Error::Io { path: path.as_ref().display().to_string(), source }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
