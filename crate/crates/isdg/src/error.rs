//! Crate-wide error type.
//!
//! Errors are split into two broad classes so the CLI can map them to exit
//! codes: validation errors (bad input files, malformed configs, vocabulary
//! drift) and internal errors (shape mismatches, non-finite values). The
//! [`Error::is_validation`] method performs the classification.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// CoNLL-U syntax or tree-validation failure, with sentence ordinal and
    /// source line number (both 1-based).
    #[error("conllu: sentence {sentence}, line {line}: {message}")]
    Conllu {
        sentence: usize,
        line: usize,
        message: String,
    },

    /// A word form could not be mapped to a character span.
    #[error("alignment: sentence {sentence}, word {word} ({form:?}): {message}")]
    Alignment {
        sentence: usize,
        word: usize,
        form: String,
        message: String,
    },

    /// Sequence packing failure (e.g. question alone exceeds max length).
    #[error("sequence: {0}")]
    Sequence(String),

    /// Graph construction or path derivation failure.
    #[error("graph: {0}")]
    Graph(String),

    /// Tensor shape disagreement inside the numeric core.
    #[error("shape: {0}")]
    Shape(String),

    /// Relation or piece vocabulary drift between artifacts.
    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),

    /// Bad configuration file or flag value.
    #[error("config: {0}")]
    Config(String),

    /// Corpus or checkpoint contents violate an expected contract.
    #[error("data: {0}")]
    Data(String),

    /// A loss or gradient evaluated to NaN/inf.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by user-supplied inputs rather than bugs.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Conllu { .. }
                | Error::Alignment { .. }
                | Error::Sequence(_)
                | Error::VocabMismatch(_)
                | Error::Config(_)
                | Error::Data(_)
                | Error::Io(_)
                | Error::Json(_)
        )
    }
}
