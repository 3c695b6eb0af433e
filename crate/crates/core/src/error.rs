use thiserror::Error;

/// Errors raised anywhere in the pipeline.
///
/// The variants line up with the CLI exit-code classes: `Config`/`Usage`
/// are user errors, `Data`/`Format`/`Io` are input problems and
/// `NonFinite`/`Numerical` are numerical failures.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("config error: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape { op, detail: detail.into() }
}
