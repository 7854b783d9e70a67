use alloc::string::String;

/// Errors produced by the relaxed-sorting operators and the training tasks
/// built on top of them.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// The scores contain an exact tie, where `sort` is not differentiable.
    #[error("gradient is ill-defined: scores at indices {first} and {second} are tied")]
    TiedScores { first: usize, second: usize },

    /// A finite-difference probe would cross a tie boundary.
    #[error(
        "finite-difference step {step:e} is too large for minimum score gap {gap:e}; \
         resample scores with a gap of at least {required:e}"
    )]
    StepTooLarge { step: f64, gap: f64, required: f64 },

    #[error("correlation is undefined for a constant input")]
    UndefinedCorrelation,

    #[error("non-finite gradient passed to the optimizer")]
    NonFiniteGradient,

    #[error("training diverged at epoch {epoch}: {reason}")]
    Diverged { epoch: usize, reason: String },
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
