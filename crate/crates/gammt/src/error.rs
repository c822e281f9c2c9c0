use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Crate-wide error type.
///
/// Variants map onto the failure classes of the library surface: shape and
/// contract violations from the tensor engine, vocabulary lookups, file
/// format problems, and resource guards on exhaustive enumeration.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("unknown token {token:?} at offset {offset}")]
    UnknownToken { token: char, offset: usize },
    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    IdOutOfRange { id: usize, vocab: usize },
    #[error("sequence length {len} outside supported range [{min}, {max}]")]
    BadLength { len: usize, min: usize, max: usize },
    #[error("config error: {0}")]
    Config(String),
    #[error("format error at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },
    #[error("enumeration would produce {required} measures, over the budget of {budget}")]
    BudgetExceeded { required: u128, budget: u128 },
    #[error("training aborted at step {step} (head {head}): {source}")]
    TrainingAborted {
        step: usize,
        head: usize,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
