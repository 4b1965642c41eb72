use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch ({detail})")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: non-finite value in result")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("loss tensor is not attached to a tape")]
    DetachedLoss,
    #[error("tape already consumed by backward")]
    TapeConsumed,
    #[error("operation mixes tensors from different tapes")]
    CrossTape,
    #[error("SVD did not converge within {0} sweeps")]
    SvdNoConvergence(usize),
    #[error("matrix is not symmetric within tolerance (max asymmetry {0:.3e})")]
    NotSymmetric(f64),
    #[error("matrix has negative eigenvalue {0:.3e} below tolerance")]
    NegativeEigenvalue(f64),
    #[error("invalid noise schedule: {0}")]
    InvalidSchedule(String),
    #[error("step index {t} outside the valid range (T = {max})")]
    StepOutOfRange { t: usize, max: usize },
    #[error("caption of length {0} exceeds the {1} word slots")]
    CaptionTooLong(usize, usize),
    #[error("unknown token id {0}")]
    UnknownToken(u16),
    #[error("empty caption")]
    EmptyCaption,
    #[error("training diverged (non-finite loss) at epoch {0}")]
    TrainingDiverged(usize),
    #[error("index out of range: {0}")]
    IndexOutOfRange(String),
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("feature set too small: need at least {need}, got {got}")]
    SetTooSmall { need: usize, got: usize },
    #[error("bad file format: {0}")]
    Format(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("pipeline stage '{stage}' failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn in_stage(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
