use thiserror::Error;

/// Errors raised by the physics modules.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// An argument lies outside the domain of the model.
    #[error("domain error: {0}")]
    Domain(String),

    /// Two bodies overlap, or an observer sits inside an exclusion radius.
    #[error("geometry error: {0}")]
    Geometry(String),

    /// The |0>-like eigenvector could not be singled out by overlap.
    #[error("transition labeling is ambiguous: overlaps {0:.6} and {1:.6} are indistinguishable")]
    LabelingAmbiguity(f64, f64),

    #[error("solver did not converge after {iterations} iterations (last bracket [{lo}, {hi}])")]
    NonConvergence { iterations: usize, lo: f64, hi: f64 },

    /// The temperature response vanishes, so no finite sensitivity exists.
    #[error("unmeasurable: {0}")]
    Unmeasurable(String),

    #[error("estimation failed: {0}")]
    Estimation(String),

    #[error("numeric overflow: {0}")]
    Overflow(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("materials table: {0}")]
    Materials(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::InvalidParameter(msg()))
    }
}
