use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("input: {0}")]
    Input(String),

    #[error("pool capacity: {0}")]
    Capacity(String),

    #[error("pairing: {0}")]
    Pairing(String),

    #[error("batch assembly: {0}")]
    Assembly(String),

    #[error("evaluation: {0}")]
    Eval(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("file format: {0}")]
    Format(String),

    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit class: 1 for user/config mistakes, 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::Shape(_)
            | Error::Input(_)
            | Error::Capacity(_)
            | Error::Pairing(_)
            | Error::Assembly(_)
            | Error::Eval(_)
            | Error::Parse { .. }
            | Error::Format(_) => 1,
            Error::Numeric(_) | Error::Io(_) => 2,
        }
    }
}
