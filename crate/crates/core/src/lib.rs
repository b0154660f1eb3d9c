//! Compute stack for fully binarized transformer encoders.
//!
//! The crate is organized around a real-binary matrix multiplication engine
//! that works on bit-packed operands: `{-1, +1}` matrices are stored one bit
//! per element with `-1` encoded as `0`, and `{0, 1}` matrices carry a
//! per-row "don't care" count that corrects the popcount identity for true
//! zeros. On top of the kernel sit the six engine operation modes used by an
//! encoder layer (QKV projection, attention score, context, output linear and
//! the two FFN layers), a polarized-softmax replacement for attention with a
//! grid search for its thresholds, a Q8.8 fixed-point LayerNorm, and an
//! analytic invocation/cycle model of the pipelined engine.
//!
//! Everything bit-exact is cross-checked against [`oracle`], a deliberately
//! naive full-precision reference that shares no kernels with the packed
//! path.
//!
//! The row-parallel loops use rayon when the `parallel` feature (default) is
//! enabled and degrade to sequential execution without it; the engine can
//! also be forced sequential at runtime for benchmarking.

pub mod bitpack;
pub mod error;
pub mod matrix;
pub mod oracle;
pub(crate) mod par;
pub mod perf;
pub mod pipeline;
pub mod popcount;
pub mod rbmm;
pub mod sps;
pub mod synth;
pub mod verify;
pub mod weights;

pub use bitpack::{pack_matrix, transpose_packed, unpack_matrix, BitMatrix, DCVector, Scheme};
pub use error::CobraError;
pub use matrix::IntMatrix;
pub use pipeline::{FixedPoint16, ModelConfig};
pub use popcount::PopcountMode;
pub use rbmm::{Engine, EngineOptions, QuantParams, RbmmMode, RbmmOutput, ThetaVector};
pub use sps::SpsThresholds;
