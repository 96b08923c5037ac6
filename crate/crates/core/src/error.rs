use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// The dose sits on the vertical asymptote `x = -theta2`.
    #[error("singularity: dose {x} lies on the vertical asymptote x = -theta2 (theta2 = {theta2})")]
    Singularity { x: f64, theta2: f64 },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("maximum likelihood estimate does not exist: sample means are not increasing and concave")]
    MleDoesNotExist,

    #[error("numerically degenerate fit: {0}")]
    NearDegenerate(String),

    #[error("degenerate design: moment determinant D = {0} is not positive")]
    DegenerateDesign(f64),

    #[error("no bracket for alpha = {alpha}: attainable range on the scanned grid is [{min}, {max}]")]
    NoBracket { alpha: f64, min: f64, max: f64 },

    #[error("limiting fit is undefined for increasing concave data")]
    NotApplicable,
}

pub type Result<T> = std::result::Result<T, Error>;
