use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid box {0:?}: coordinates must be finite with min <= max")]
    InvalidBox([f64; 4]),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("class {0} has no ground-truth scores; the detector never fired on an annotated box")]
    EmptyClassScores(u32),

    #[error("no score threshold for class {0}")]
    MissingThreshold(u32),

    #[error("{0} scores supplied for {1} samples")]
    LengthMismatch(usize, usize),

    #[error(
        "drop rate {rate} is infeasible for class {class_id} ({class_name}): \
         {needed} drops required, only {eligible} eligible"
    )]
    InfeasibleDropRate {
        rate: f64,
        class_id: u32,
        class_name: String,
        needed: usize,
        eligible: usize,
    },

    #[error("image {0} has no proposals")]
    MissingProposals(String),

    #[error("class {0} has no ground-truth boxes")]
    NoGroundTruth(u32),

    #[error("dataset contains no annotations")]
    EmptyDataset,

    #[error("unknown class ids: {0:?}")]
    UnknownClasses(Vec<u32>),

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("dataset does not match the generated scene: {0}")]
    SceneMismatch(String),

    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Divergence { epoch: usize },

    #[error("malformed XML in {path}: {message}")]
    Xml { path: String, message: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for failures of the numerical kind (divergence), as opposed to
    /// bad input data.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Divergence { .. })
    }
}
