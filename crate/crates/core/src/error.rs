use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid plant model: {0}")]
    InvalidModel(String),

    #[error("(A, B) is not stabilizable: {0}")]
    NonStabilizable(String),

    #[error("LQG budget {gamma} does not exceed the minimum achievable cost {min_cost}")]
    InfeasibleBudget { gamma: f64, min_cost: f64 },

    #[error("barrier solver failed: {0}")]
    NumericalFailure(String),

    #[error("zero-rate solution: no measurement channel is needed")]
    DegenerateChannel,

    #[error("closed-loop chain is unstable: |R| = {0} >= 1")]
    UnstableChain(f64),

    #[error("malformed bitstream at bit {0}")]
    MalformedStream(usize),

    #[error("symbol {0} is not in the codebook and the codebook has no escape word")]
    Unencodable(i64),

    #[error("encoder and decoder diverged at step {0}")]
    SyncLoss(usize),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, Error>;
