//! Error type shared across the crate.

use thiserror::Error;

/// Errors produced by any stage of the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Chunking was asked for zero-token chunks.
    #[error("chunk size must be at least 1")]
    ChunkSizeZero,

    /// A backend request did not complete within the configured timeout.
    #[error("backend request timed out after {0} ms")]
    Timeout(u64),

    /// The backend replied 429 (or equivalent) and retries were exhausted.
    #[error("backend rate limited: {0}")]
    RateLimited(String),

    /// The backend replied with a body we could not interpret.
    #[error("malformed backend reply: {0}")]
    MalformedBackendReply(String),

    /// The configured API key environment variable is not set.
    #[error("API key environment variable `{0}` is not set")]
    AuthMissing(String),

    /// The backend is unreachable or returned a retryable server error.
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),

    /// A scripted mock backend received a request no rule matches.
    #[error("no mock rule matches request (prompt hash {prompt_hash:#018x})")]
    MockUnmatched { prompt_hash: u64 },

    /// An embedding backend returned vectors of inconsistent dimension.
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },

    /// Vector math on a zero-norm vector.
    #[error("zero-norm embedding vector")]
    ZeroNorm,

    /// A structured parser reply violates the reply grammar.
    #[error("reply grammar violation at byte {offset}: {message}")]
    GrammarViolation { offset: usize, message: String },

    /// A chunk could not be parsed even after the repair attempt.
    #[error("chunk {chunk_id} parse failed after repair: {message}")]
    ParseFailure { chunk_id: usize, message: String },

    /// A map/reduce reply could not be parsed as a verdict.
    #[error("verdict parse failure: {0}")]
    VerdictParseFailure(String),

    /// Cluster summarization failed even after the repair attempt.
    #[error("summarization failed: {0}")]
    SummarizeFailure(String),

    /// A persisted tree file is unreadable or fails validation.
    #[error("corrupt tree file ({location}): {message}")]
    CorruptFile { location: String, message: String },

    /// A dataset record is malformed.
    #[error("dataset format error at line {line}: {message}")]
    FormatError { line: usize, message: String },

    /// A prediction matched none of the offered choices.
    #[error("prediction matched no choice")]
    NoChoiceMatched,

    /// Invalid configuration value.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// Pipeline input was empty where content is required.
    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// True for transient transport errors that the gateway retries.
    pub fn is_retryable(&self) -> bool {
        matches!(
            self,
            Error::Timeout(_) | Error::RateLimited(_) | Error::BackendUnavailable(_)
        )
    }
}
