//! Cross-spectrum dual-subspace pairing (CDP) for RGB-infrared cross-modality
//! person re-identification.
//!
//! The crate is organised bottom-up:
//!
//! - [`imaging`]: pixel operations, spectrum generation, PPM/PGM I/O.
//! - [`dataset`]: manifests, splits and the synthetic cross-modality generator.
//! - [`sampler`]: PK sampling, dual-subspace pairing and dynamic hard spectrum mining.
//! - [`model`]: the miniature one-stream CNN with exact backpropagation and checkpoints.
//! - [`losses`]: cross-entropy, batch-hard triplet and their weighted sum.
//! - [`optim`]: Adam, the step learning-rate schedule and the training loop.
//! - [`eval`]: embedding extraction, CMC/mAP and the repeated-trial protocol.
//! - [`report`]: CSV, Markdown and SVG emission of evaluation results.
//!
//! Data-parallel inner loops (per-sample forward/backward, distance rows,
//! evaluation trials) run on rayon when the `parallel` feature is enabled and
//! fall back to plain iterators otherwise. Reductions always happen in a fixed
//! order, so results are bit-identical with either build.

pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod imaging;
pub mod losses;
pub mod matrix;
pub mod model;
pub mod optim;
pub mod par;
pub mod report;
pub mod rng;
pub mod sampler;

pub use error::{Error, Result};
pub use matrix::Matrix;
