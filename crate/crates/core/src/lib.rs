//! A compact eager-execution deep-learning runtime: strided tensors over
//! use-counted storage, tape-based reverse-mode autograd with mutation
//! versioning, a caching one-pool-per-stream allocator, an asynchronous
//! virtual-stream executor, and a small model/optimizer/data layer.

pub mod alloc;
pub mod autograd;
pub mod data;
pub mod dtype;
pub mod error;
pub mod memory;
pub mod nn;
pub mod rng;
pub mod runtime;
pub mod stream;
pub mod tensor;
pub mod trace;

pub use dtype::DType;
pub use error::{Error, Result};
pub use runtime::Runtime;
pub use stream::{ExecMode, StreamId};
pub use tensor::Tensor;
