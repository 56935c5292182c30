use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic in {0}: expected FBCF header")]
    BadMagic(PathBuf),
    #[error("unsupported format in {path}: {detail}")]
    UnsupportedFormat { path: PathBuf, detail: String },
    #[error("truncated file {path}: expected {expected} bytes, found {found}")]
    TruncatedFile {
        path: PathBuf,
        expected: u64,
        found: u64,
    },
    #[error("non-finite value at row {row}, column {col}")]
    NonFiniteValue { row: usize, col: usize },
    #[error("row {row} has zero norm and cannot be normalized")]
    ZeroNormRow { row: usize },
    #[error("expected {expected} rows, found {found}")]
    RowCountMismatch { expected: usize, found: usize },
    #[error("negative label {value} at row {row}")]
    NegativeLabel { row: usize, value: i64 },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("checksum mismatch for {path}")]
    ChecksumMismatch { path: PathBuf },
    #[error("selection produced no rows")]
    EmptyResult,
    #[error("cycle detected in tree at node {0}")]
    CycleDetected(String),
    #[error("node {child} references unknown parent {parent}")]
    DanglingParent { child: String, parent: String },
    #[error("duplicate node id {0}")]
    DuplicateId(String),
    #[error("label {0} does not map to a tree node")]
    UnmappedLabel(u32),
    #[error("unknown class {0}")]
    UnknownClass(usize),
    #[error("odd-class halving may only be applied to the train split")]
    AppliedToValSplit,
    #[error("k={k} exceeds the available {available}")]
    KTooLarge { k: usize, available: usize },
    #[error("class {0} has no resolvable term")]
    UnknownTerm(usize),
    #[error("refinement exceeded the depth budget of {0} steps")]
    DepthBudgetExceeded(usize),
    #[error("features must be row-normalized")]
    NotNormalized,
    #[error("requested {c} clusters from {n} rows")]
    CTooLarge { c: usize, n: usize },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("neighbor table does not match the feature matrix")]
    NeighborMisaligned,
    #[error("non-finite loss at epoch {epoch}, step {step}, head {head}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        head: usize,
    },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("top-k evaluation needs k={k} <= C={c}")]
    KExceedsC { k: usize, c: usize },
    #[error("value out of range: {0}")]
    OutOfRange(String),
    #[error("empty input")]
    EmptyInput,
    #[error("at least two clusters are required")]
    SingleCluster,
    #[error("no evaluation reports found in {0}")]
    EmptyDirectory(PathBuf),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
