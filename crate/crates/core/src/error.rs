use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("row {row} is fully masked")]
    FullyMaskedRow { row: usize },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("script error at line {line}, column {column}: {message}")]
    Script {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("unknown character `{name}` at line {line}, column {column}")]
    UnknownCharacter { name: String, line: usize, column: usize },

    #[error("duplicate character name `{name}` at line {line}")]
    DuplicateCharacter { name: String, line: usize },

    #[error("script declares no scenes")]
    EmptyScenes,

    #[error("reference for character {character} at block {block} is already stored")]
    DuplicateReference { character: usize, block: usize },

    #[error("character {character} has a degenerate mask; no reference stored")]
    DegenerateReference { character: usize },

    #[error("no reference stored for character {character} at block {block}")]
    MissingReference { character: usize, block: usize },

    #[error("llm endpoint error: {0}")]
    Endpoint(String),

    #[error("llm response rejected: {0}")]
    Response(String),

    #[error("plan is inconsistent: {0}")]
    Plan(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
