use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid support ({lo}, {hi}): lower bound must be below upper bound")]
    InvalidSupport { lo: f64, hi: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("likelihood is degenerate (p = {0}); Fisher information undefined")]
    DegenerateLikelihood(f64),

    #[error("posterior is degenerate: every likelihood underflowed to zero")]
    DegeneratePosterior,

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: usize, actual: usize },

    #[error("episode trace is empty")]
    EmptyTrace,

    #[error("training diverged at iteration {iteration}: loss = {loss}")]
    Diverged { iteration: usize, loss: f64 },

    #[error("protocol needs a trained {0}")]
    MissingArtifact(&'static str),

    #[error("malformed {what}: {reason}")]
    Format { what: &'static str, reason: String },
}

pub type Result<T> = std::result::Result<T, Error>;
