use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected:?}, got {actual:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },

    #[error("degenerate camera configuration: {0}")]
    DegenerateCamera(String),

    #[error("point lies behind the target camera (depth {0})")]
    BehindCamera(f64),

    #[error("depth map has no valid pixels")]
    NoValidDepth,

    #[error("layer budget {budget} cannot hold {required} promoted groups")]
    LayerBudgetInfeasible { budget: usize, required: usize },

    #[error("layers are not sorted near-to-far")]
    UnsortedLayers,

    #[error("motion field is {actual:?} but frame is {expected:?}")]
    MotionSizeMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },

    #[error("rate budget {budget} is below the minimum achievable total {minimum}")]
    InfeasibleRateBudget { budget: f64, minimum: f64 },

    #[error("codec `{0}` is not supported")]
    CodecUnsupported(String),

    #[error("corrupt container: {0}")]
    CorruptContainer(String),

    #[error("unsupported container version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("truncated stream: {0}")]
    TruncatedStream(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}

impl From<image::ImageError> for Error {
    fn from(e: image::ImageError) -> Self {
        Error::Image(e.to_string())
    }
}
