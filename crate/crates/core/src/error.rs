//! Error types shared across the crate.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        context: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("non-finite value produced in {0}")]
    NonFinite(String),

    #[error("all positions are masked in {0}")]
    AllMasked(String),

    #[error("token sequence of length {len} exceeds the configured maximum {max}")]
    SequenceOverflow { len: usize, max: usize },

    #[error("caption tokenized to zero words and allow_empty_caption is off")]
    EmptyCaption,

    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },

    #[error("identity label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("no candidate with a different identity exists for anchor {anchor}")]
    NoValidNegative { anchor: usize },

    #[error("cosine similarity undefined: zero-norm embedding in {0}")]
    ZeroNorm(String),

    #[error("{value} is not divisible by {divisor} ({context})")]
    NotDivisible {
        value: usize,
        divisor: usize,
        context: String,
    },

    #[error("commonality requires at least 2 classes, got {0}")]
    TooFewClasses(usize),

    #[error("infeasible synthetic spec: {0}")]
    InfeasibleSpec(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("annotation record {index} is missing field `{field}`")]
    MissingField { index: usize, field: String },

    #[error("image path does not exist: {0}")]
    DanglingImage(String),

    #[error("checkpoint is corrupt or has an incompatible layout: {0}")]
    Checkpoint(String),

    #[error("training diverged at step {step}: {term} is non-finite")]
    Diverged { step: usize, term: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;
