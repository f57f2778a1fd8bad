use std::path::PathBuf;

/// Errors raised anywhere in the pipeline.
///
/// Variants are grouped by [`ErrorKind`] so that callers (the CLI in
/// particular) can map them onto stable exit codes.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,

    #[error("trainable parameter `{0}` has no gradient")]
    MissingGradient(String),

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("wav format error in field `{field}`: {detail}")]
    WavFormat { field: &'static str, detail: String },

    #[error("audio too short: {samples} samples, need at least {needed}")]
    EmptyFeatures { samples: usize, needed: usize },

    #[error("audio of {seconds:.3} s is too short to yield a segment")]
    NoSegment { seconds: f64 },

    #[error("PHQ-8 score {0} outside 0..=24")]
    ScoreOutOfRange(i64),

    #[error("unsatisfiable corpus configuration: {0}")]
    Unsatisfiable(String),

    #[error("infeasible CTC alignment: {frames} frames cannot emit {labels} labels with {repeats} repeats")]
    InfeasibleAlignment {
        frames: usize,
        labels: usize,
        repeats: usize,
    },

    #[error("symbol {symbol} outside alphabet of size {alphabet}")]
    SymbolOutOfAlphabet { symbol: usize, alphabet: usize },

    #[error("checkpoint checksum mismatch: stored {stored:#018x}, computed {computed:#018x}")]
    Checksum { stored: u64, computed: u64 },

    #[error("unsupported checkpoint version {found} (this build reads {supported})")]
    Version { found: u32, supported: u32 },

    #[error("bad magic in {what}: {found:?}")]
    Magic { what: &'static str, found: [u8; 4] },

    #[error("truncated {0}")]
    Truncated(&'static str),

    #[error("shape mismatch for `{name}`: source {source_shape:?}, destination {dest_shape:?}")]
    ShapeMismatch {
        name: String,
        source_shape: Vec<usize>,
        dest_shape: Vec<usize>,
    },

    #[error("metric needs both classes present ({positives} positives, {negatives} negatives)")]
    SingleClass { positives: usize, negatives: usize },

    #[error("paired comparison requires identical labels")]
    LabelMismatch,

    #[error("Pearson correlation undefined for zero-variance input")]
    UndefinedPcc,

    #[error("reference transcript is empty")]
    EmptyReference,

    #[error("data error: {0}")]
    Data(String),

    #[error("labels for split `{0}` are withheld until final evaluation")]
    LabelsWithheld(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Coarse classification used for exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) | Error::Unsatisfiable(_) => {
                ErrorKind::Config
            }
            Error::NonFinite(_) | Error::InfeasibleAlignment { .. } => ErrorKind::Numeric,
            _ => ErrorKind::Data,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
