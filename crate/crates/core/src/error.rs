use thiserror::Error;

/// Errors produced by construction, validation, and the trajectory engines.
#[derive(Debug, Clone, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("matrix is not square: {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },

    #[error("empty eigenvalue list")]
    EmptyEigenvalues,

    #[error("Lindblad set must contain at least one operator")]
    EmptyLindbladSet,

    #[error("projector set requires dim >= 2, got {0}")]
    ProjectorDimTooSmall(usize),

    #[error("non-finite entries in {context}")]
    NonFinite { context: &'static str },

    #[error("operator is not Hermitian: max |A - A†| = {deviation:.3e}")]
    NotHermitian { deviation: f64 },

    #[error("trace deviates from {expected}: got {got}")]
    BadTrace { expected: f64, got: f64 },

    #[error("state norm deviates from 1: got {0}")]
    BadNorm(f64),

    #[error(
        "negative eigenvalue {min_eigenvalue:.3e} below the positivity floor (step size too large)"
    )]
    PsdViolation { min_eigenvalue: f64 },

    #[error("weight {weight:.3e} is not positive")]
    NonPositiveWeight { weight: f64 },

    #[error("weights sum to zero")]
    ZeroWeightSum,

    #[error("noise increments require dt > 0, got {0}")]
    NonPositiveDt(f64),

    #[error("noise increments require at least one channel")]
    ZeroChannels,

    #[error("dt * max ‖L‖² = {value:.3} exceeds the stability bound {bound}")]
    StepTooLarge { value: f64, bound: f64 },

    #[error("invalid experiment spec: {0}")]
    InvalidSpec(String),

    #[error("state-vector engine requires a pure initial state (purity = {purity:.6})")]
    NotPure { purity: f64 },

    #[error("empty outcome list")]
    EmptyOutcomes,

    #[error("decay-rate fit window is empty: signal below the noise floor")]
    EmptyFitWindow,

    #[error("trajectory {index}: {source}")]
    Trajectory {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("serialization: {0}")]
    Serialize(String),
}

impl Error {
    pub(crate) fn at_trajectory(self, index: usize) -> Error {
        Error::Trajectory {
            index,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
