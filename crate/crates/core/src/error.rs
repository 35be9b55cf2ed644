//! Error type shared by every subsystem.

use crate::dtype::DType;
use thiserror::Error;

/// Errors produced by tensor ops, the autograd engine, the allocator, the
/// stream executor, and the data pipeline.
#[derive(Debug, Clone, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("unsupported dtype {dtype:?} for {op}")]
    UnsupportedDType { op: &'static str, dtype: DType },

    #[error("dtype mismatch: {lhs:?} vs {rhs:?}")]
    DTypeMismatch { lhs: DType, rhs: DType },

    #[error("shapes {lhs:?} and {rhs:?} are not broadcast-compatible")]
    BroadcastError { lhs: Vec<usize>, rhs: Vec<usize> },

    #[error("integer division by zero")]
    DivisionByZero,

    #[error("axis {axis} out of range for rank {rank}")]
    AxisOutOfRange { axis: usize, rank: usize },

    #[error("reduction over an empty extent")]
    EmptyReduction,

    #[error("dropout probability {0} outside [0, 1)")]
    InvalidProbability(f64),

    #[error("reshape requires a contiguous tensor")]
    NonContiguousReshape,

    #[error("slice [{start}, {stop}) out of range for extent {extent}")]
    SliceOutOfRange {
        start: usize,
        stop: usize,
        extent: usize,
    },

    #[error("in-place operation on a leaf tensor that requires grad (or a view of one)")]
    InplaceOnLeafRequiringGrad,

    #[error("backward on a non-scalar tensor requires an explicit upstream gradient")]
    MissingUpstreamForNonScalar,

    #[error(
        "saved tensor for `{op}` was mutated after being saved \
         (expected version {expected}, found {actual})"
    )]
    VersionMismatch {
        op: String,
        expected: u64,
        actual: u64,
    },

    #[error("graph already consumed; pass retain to backward to reuse it")]
    DoubleBackwardWithoutRetain,

    #[error("backward root does not require grad")]
    RootRequiresNoGrad,

    #[error("custom function `{op}` returned {got} gradients for {expected} inputs")]
    ArityMismatch {
        op: String,
        expected: usize,
        got: usize,
    },

    #[error("gradcheck requires a scalar-valued function, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),

    #[error("external buffer of {nbytes} bytes too small for {needed} bytes")]
    BufferTooSmall { nbytes: usize, needed: usize },

    #[error("operation requires a contiguous tensor")]
    NonContiguous,

    #[error("out of memory: {requested} bytes requested (after cache flush)")]
    OutOfMemory { requested: usize },

    #[error("block {0} freed twice")]
    DoubleFree(u64),

    #[error("executor is shut down")]
    ShutdownError,

    #[error("cannot change execution mode while streams have pending work")]
    BusyExecutor,

    #[error("collate failed: {0}")]
    CollateError(String),

    #[error("data-loader worker failed on sample {index}: {message}")]
    WorkerCrashed { index: usize, message: String },

    #[error("parameter `{0}` has no gradient")]
    MissingGradient(String),

    #[error("unknown gradcheck op `{0}`")]
    UnknownOp(String),

    #[error("tensors belong to different runtimes")]
    RuntimeMismatch,

    #[error("io error: {0}")]
    Io(String),

    #[error("bad tensor file: {0}")]
    BadTensorFile(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

/// Convenience alias used across the crate.
pub type Result<T> = std::result::Result<T, Error>;
