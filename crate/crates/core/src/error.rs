use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("histogram has a single intensity value; no threshold separates two classes")]
    DegenerateHistogram,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("descriptor window has no gradient energy")]
    EmptyDescriptor,

    #[error("malformed file: {0}")]
    Format(String),

    #[error("entity {0} is not in the manifest")]
    UnknownEntity(String),

    #[error("cannot parse entity id {0:?}")]
    BadEntityId(String),

    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },

    #[error("image not found: {}", .0.display())]
    MissingImage(PathBuf),

    #[error("need at least {needed} distinct points for clustering, got {got}")]
    TooFewPoints { needed: usize, got: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },

    #[error("empty descriptor set")]
    EmptySet,

    #[error("no valid triplets")]
    NoValidTriplets,

    #[error("zero vector cannot be normalized")]
    ZeroVector,

    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("bad output dimension {out_dim}: must be in 1..={max}")]
    BadDim { out_dim: usize, max: usize },

    #[error("gallery is empty")]
    EmptyGallery,

    #[error("query has no relevant items in the gallery")]
    NoRelevant,

    #[error("no query has a relevant gallery item")]
    NoQueries,

    #[error("ranked list has {len} items, fewer than x = {x}")]
    ListTooShort { len: usize, x: usize },

    #[error("insufficient corpus: {0}")]
    InsufficientCorpus(String),

    #[error("no page has {0} or more lines")]
    EmptyAfterMerge(usize),

    #[error("word {0:?} occurs for fewer than two writers")]
    WordTooRare(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}
