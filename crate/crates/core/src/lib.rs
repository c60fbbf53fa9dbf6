//! Training engine for cross-similarity contrastive pretraining.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`], [`graph`], [`gradcheck`]: dense tensors and a tape-based
//!   reverse-mode autodiff engine, generic over `f32`/`f64`.
//! - [`augment`]: patch masking and photometric jitter producing the second view.
//! - [`crosssim`]: the patch cross-similarity operator and its loop oracle.
//! - [`losses`]: consistency, similarity and instance losses and their sum.
//! - [`encoder`]: the convolutional encoder, its projector and the online/target pair.
//! - [`optim`]: LARS, Adam and the learning-rate / momentum schedules.
//! - [`trainer`], [`checkpoint`]: the pretraining loop and its on-disk state.

pub mod augment;
pub mod checkpoint;
pub mod crosssim;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod losses;
pub mod optim;
pub mod ops;
pub mod params;
pub mod real;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use real::Real;
pub use tensor::Tensor;
