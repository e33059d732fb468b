use std::path::PathBuf;

use thiserror::Error;

/// Every failure mode surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not symmetric (max asymmetry {max_asym:.3e})")]
    NonSymmetric { max_asym: f64 },
    #[error("non-finite value encountered in {context}")]
    NonFinite { context: &'static str },
    #[error("matrix is indefinite beyond tolerance (eigenvalue {eigenvalue:.3e})")]
    IndefiniteBeyondTolerance { eigenvalue: f64 },
    #[error("matrix is numerically singular (pivot {pivot:.3e}, threshold {threshold:.3e})")]
    Singular { pivot: f64, threshold: f64 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("index {index} out of range for dimension {dim}")]
    IndexOutOfRange { index: usize, dim: usize },
    #[error("duplicate index {0}")]
    DuplicateIndex(usize),
    #[error("non-finite activation in layer {layer}")]
    NonFiniteActivation { layer: usize },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt manifest: {0}")]
    CorruptManifest(String),
    #[error("bad IDX magic {found:#010x}, expected {expected:#010x}")]
    BadMagic { found: u32, expected: u32 },
    #[error("truncated file {0}")]
    TruncatedFile(PathBuf),
    #[error("training loss diverged at epoch {epoch}")]
    DivergedLoss { epoch: usize },
    #[error("negative regularization {0}")]
    NegativeLambda(f64),
    #[error("covariance is identically zero")]
    ZeroMatrix,
    #[error("maximum row norm of the weight matrix is zero")]
    ZeroRowNorm,
    #[error("all weight rows are zero")]
    AllZeroRows,
    #[error("weighted Gram matrix has zero operator norm")]
    ZeroOperatorNorm,
    #[error("budget constraint infeasible in layer {layer}: selected {selected} of {requested}")]
    Infeasible {
        layer: usize,
        selected: usize,
        requested: usize,
    },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
