use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite gradient for parameter `{0}`; optimizer step aborted")]
    NonFiniteGradient(String),

    #[error("missing parameter `{0}`")]
    MissingParameter(String),

    #[error("invalid camera: {0}")]
    InvalidCamera(String),

    #[error("dimension mismatch: image is {image:?}, depth is {depth:?}")]
    DimensionMismatch {
        image: (usize, usize),
        depth: (usize, usize),
    },

    #[error("no valid depth pixels")]
    NoValidPixels,

    #[error("point {index} lies at or behind the camera plane (z = {z})")]
    BehindCamera { index: usize, z: f64 },

    #[error("point {index} falls outside the normalization frustum")]
    OutsideFrustum { index: usize },

    #[error("ndc depth {0} outside [-1, 1]")]
    NdcOutOfRange(f32),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("point cloud too small: {got} points, need at least {need}")]
    CloudTooSmall { got: usize, need: usize },

    #[error("image too small: {width}x{height}, need at least {min}x{min}")]
    ImageTooSmall {
        width: usize,
        height: usize,
        min: usize,
    },

    #[error("attention logits are not finite (max |logit| = {max_logit})")]
    AttentionOverflow { max_logit: f32 },

    #[error("training diverged at iteration {iteration}: {detail}")]
    Diverged { iteration: usize, detail: String },

    #[error("stage-2 training requires a stage-1 checkpoint")]
    MissingStage1,

    #[error("malformed {kind} file: {detail}")]
    Format { kind: &'static str, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    IoBare(#[from] std::io::Error),

    #[error("config: {0}")]
    Config(String),

    #[error("view pair ({0}, {1}) has no co-visible pixels")]
    EmptyCovisibility(usize, usize),

    #[error("empty mask")]
    EmptyMask,

    #[error("pose outside bounds: {0}")]
    PoseOutOfBounds(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
