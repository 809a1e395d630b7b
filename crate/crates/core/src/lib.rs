//! Continual prompt learning for a compact dual-encoder image/text model.
//!
//! Everything runs in f64 on the CPU with explicit seeding, so identical
//! inputs give bit-identical results: a tape-based reverse-mode autodiff
//! core, a frozen two-tower transformer backbone, per-layer cross-modal
//! prompts tied together by aligner projections, a prototype-keyed prompt
//! pool with threshold routing, and a synthetic multi-domain benchmark with
//! training, inference and accuracy-matrix metrics layered on top.

pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod optim;
pub mod params;
pub mod pool;
pub mod prompt;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use params::ParamStore;
pub use rng::Rng;
pub use tape::{Gradients, Tape, ValId};
pub use tensor::Tensor;
