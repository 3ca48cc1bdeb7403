use thiserror::Error;

/// Errors surfaced by the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty set cannot be aggregated")]
    EmptySet,

    #[error("zero-norm vector: {0}")]
    ZeroNorm(String),

    /// A descriptor coincided with every centre it was assigned to, so its
    /// weighted-residual contribution vanished and cannot be normalized.
    #[error("element {element} produced a zero-norm contribution")]
    ZeroContribution { element: usize },

    #[error("sample rank {achieved} is below the {required} requested components")]
    RankDeficient { achieved: usize, required: usize },

    /// Pre-tagging is closed-world: only identities present at tagging time
    /// can be queried.
    #[error("identity {0} is not in the tag vocabulary (closed-world index)")]
    UnknownIdentity(u64),

    #[error("training diverged at epoch {epoch}, batch {batch}: loss is not finite")]
    Diverged { epoch: usize, batch: usize },

    #[error("{0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// True when the error is a caller mistake rather than an internal
    /// failure; the CLI maps this to exit code 2.
    pub fn is_user_error(&self) -> bool {
        matches!(
            self,
            Error::InvalidArgument(_)
                | Error::UnknownIdentity(_)
                | Error::RankDeficient { .. }
                | Error::Format(_)
        )
    }
}
