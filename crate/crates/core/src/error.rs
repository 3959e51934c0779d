use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("patch size {patch} does not divide image {height}x{width}")]
    NonDivisibleGeometry {
        height: usize,
        width: usize,
        patch: usize,
    },
    #[error("series length {len} is not a multiple of segment length {segment}")]
    NonDivisibleLength { len: usize, segment: usize },
    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("loss or gradient is not finite")]
    NonFiniteLoss,
    #[error("index {index} out of range for codebook of size {codes}")]
    IndexOutOfRange { index: usize, codes: usize },
    #[error("utilization requires a nonempty history")]
    EmptyHistory,
    #[error("need {needed} distinct samples per head, found {found}")]
    InsufficientSamples { needed: usize, found: usize },
    #[error("batch mixes visual and temporal samples")]
    MixedModalityBatch,
    #[error("bundle is frozen")]
    FrozenBundle,
    #[error("bundle must be frozen for this operation")]
    NotFrozen,
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("window {window} exceeds series length {len}")]
    WindowTooLarge { window: usize, len: usize },
    #[error("class subset is empty")]
    EmptySubset,
    #[error("cannot assign {rows} rows injectively into {cols} columns")]
    InfeasibleShape { rows: usize, cols: usize },
    #[error("no reference images for class {0}")]
    NoReferences(usize),
    #[error("outpainter modified the observed prefix")]
    OutpainterContractViolation,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("parse error at row {row}, column {col}: {msg}")]
    ParseError { row: usize, col: usize, msg: String },
    #[error("file is empty")]
    EmptyFile,
    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),
    #[error("corrupt header: {0}")]
    CorruptHeader(String),
    #[error("checkpoint checksum mismatch")]
    ChecksumMismatch,
    #[error("unsupported checkpoint version {0}")]
    VersionUnsupported(u32),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("missing checkpoint: {}", .0.display())]
    MissingCheckpoint(PathBuf),
    #[error("config: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
