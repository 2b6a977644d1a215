//! Rotation-invariant classification building blocks.
//!
//! The crate provides, bottom-up:
//!
//! * [`tensor`] / [`autodiff`] — dense row-major tensors over `f32`/`f64`
//!   and a tape-based reverse-mode differentiation graph covering the
//!   kernels used everywhere else (convolutions, pooling, bilinear
//!   resampling, softmax/attention, monomial pooling, ...).
//! * [`group`] — the cyclic rotation group `C_n` acting on image planes
//!   and on group-structured ("regular") feature maps.
//! * [`steerable`] — a circular-harmonic steerable filter basis plus
//!   lifting and group convolutions whose rotated filter copies are
//!   produced analytically, and the parameter-budget arithmetic used to
//!   match equivariant models against plain baselines.
//! * [`ii`] — invariant-integration heads (monomial, weighted-sum in
//!   local/global form, MLP and self-attention variants) that turn
//!   equivariant feature maps into rotation-invariant feature vectors.
//! * [`selection`] — monomial pool initialization and the random /
//!   magnitude / connectivity selection algorithms.
//! * [`data`], [`model`], [`train`] — a small training harness: IDX
//!   dataset I/O, a synthetic rotated-glyph generator, stratified
//!   subsampling, model assembly from a declarative config, and an
//!   Adam/SGD training loop with deterministic metrics output.
//! * [`checkpoint`] — the binary tensor container used for model
//!   checkpoints.
//! * [`verify`] — runnable property suites (group axioms, equivariance,
//!   invariance, weighted-sum identity, gradient checks) shared by the
//!   CLI `verify` command and the test suite.
//!
//! Every operation is deterministic for a fixed seed: parallel kernels
//! (feature `parallel`, on by default) only distribute independent
//! output elements across threads and keep every accumulation in a fixed
//! sequential order, so results are bitwise identical with any thread
//! count and with the feature disabled.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod group;
pub mod ii;
pub mod interp;
pub mod kernels;
pub mod model;
pub mod parallel;
pub mod params;
pub mod rng;
pub mod scalar;
pub mod selection;
pub mod steerable;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;
