use thiserror::Error;

/// Errors raised by the sequence-model operations.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid vocabulary spec: {0}")]
    InvalidSpec(String),

    #[error("capacity exceeded: {required} states or sequences needed, budget is {budget}")]
    Capacity { required: u128, budget: u128 },

    #[error("unknown prefix {0:?}")]
    UnknownPrefix(Vec<usize>),

    #[error("malformed sequence {0:?}")]
    MalformedSequence(Vec<usize>),

    #[error("prefix {prefix:?} has zero probability mass")]
    ZeroMassPrefix { prefix: Vec<usize> },

    #[error("support violation: {0}")]
    SupportViolation(String),

    #[error("state {prefix:?} has no finite logit")]
    DegenerateState { prefix: Vec<usize> },

    #[error("invalid distribution: total mass {mass} deviates from 1")]
    Validity { mass: f64 },

    #[error("no feasible path: every sequence has score -inf")]
    NoFeasiblePath,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("operation requires variable-length mode")]
    FixedLenUnsupported,

    #[error("training diverged: risk {risk} exceeded 10x its initial value {initial}")]
    Divergence { risk: f64, initial: f64 },

    #[error("malformed document: {0}")]
    Format(String),

    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
