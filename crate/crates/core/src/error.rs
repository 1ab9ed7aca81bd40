use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse failure class, used by the command line to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numerical,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("vector norm {norm:e} is at or below the normalization floor")]
    NearZeroNorm { norm: f64 },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("non-finite loss in term `{term}`")]
    NonFiniteLoss { term: String },
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        actual: String,
    },
    #[error("tracklet or clip has no frames")]
    EmptyTracklet,
    #[error("batch has no source rows")]
    NoSourceRows,
    #[error("batch has no target rows")]
    NoTargetRows,
    #[error("index {index} out of range for set of size {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("pair ({0}, {0}) is a self pair")]
    SelfPair(usize),
    #[error("pair weight {0} outside [0, 1]")]
    WeightOutOfRange(f64),
    #[error("pace gamma must be positive, got {0}")]
    NonPositiveGamma(f64),
    #[error("pair loss must be non-negative, got {0}")]
    NegativePairLoss(f64),
    #[error("label {0} is unknown")]
    UnknownLabel(String),
    #[error("need more than {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("invalid neighbour count k={k} for {n} samples")]
    BadK { k: usize, n: usize },
    #[error("distance matrix is not symmetric at ({0}, {1})")]
    AsymmetricMatrix(usize, usize),
    #[error("DBSCAN eps must be positive and finite, got {0}")]
    BadEps(f64),
    #[error("DBSCAN min_pts must be at least 1")]
    BadMinPts,
    #[error("empty input to {0}")]
    EmptyInput(&'static str),
    #[error("momentum must lie in [0, 1], got {0}")]
    BadMomentum(f64),
    #[error("sample {0} is not present in the memory bank")]
    UnknownSample(usize),
    #[error("bad configuration: {0}")]
    BadConfig(String),
    #[error("tracklet has {frames} frames, cannot split into {clips} clips")]
    TooFewFrames { frames: usize, clips: usize },
    #[error("clip has {frames} frames, fewer than {chunks} chunks")]
    ClipTooShort { frames: usize, chunks: usize },
    #[error("query {0} has no valid cross-camera match in the gallery")]
    NoValidMatch(usize),
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("parse error in {file} line {line}: {msg}")]
    Parse {
        file: String,
        line: usize,
        msg: String,
    },
    #[error("cannot access {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::BadConfig(_) => ErrorKind::Config,
            Error::NearZeroNorm { .. } | Error::NonFinite(_) | Error::NonFiniteLoss { .. } => {
                ErrorKind::Numerical
            }
            Error::Io { .. } | Error::Parse { .. } | Error::DimMismatch(_) => ErrorKind::Data,
            _ => ErrorKind::Data,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(
        context: &'static str,
        expected: impl ToString,
        actual: impl ToString,
    ) -> Self {
        Error::ShapeMismatch {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}
