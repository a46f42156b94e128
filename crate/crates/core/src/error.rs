use alloc::boxed::Box;
use alloc::string::String;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{context}: shape mismatch (expected {expected:?}, found {found:?})")]
    Shape {
        context: &'static str,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("matrix must have at least one row and one column")]
    EmptyMatrix,
    #[error("{0}: empty input")]
    EmptyInput(&'static str),
    #[error("{0}: non-finite value")]
    NonFinite(&'static str),
    #[error("{0}: matrix is singular")]
    Singular(&'static str),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("step {step} out of range 1..={steps}")]
    StepOutOfRange { step: usize, steps: usize },
    #[error("feature length {found} does not match probe length {expected}")]
    FeatureLength { expected: usize, found: usize },
    #[error("probe training data must contain both classes")]
    SingleClass,
    #[error("{what} = {value} is outside {range}")]
    OutOfRange {
        what: &'static str,
        value: f64,
        range: &'static str,
    },
    #[error("{context}: need at least {needed} clients, got {found}")]
    TooFewClients {
        context: &'static str,
        needed: usize,
        found: usize,
    },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("round {round}, client {client}: {source}")]
    Client {
        round: usize,
        client: usize,
        source: Box<Error>,
    },
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
