//! Seeded graph matching for keypoint correspondence.
//!
//! Given two keypoint sets (positions plus descriptors), this crate finds
//! correspondences by running sparse attentional message passing through a
//! small set of reliable *seed* matches, then solving a dustbin-augmented
//! optimal-transport assignment with Sinkhorn iterations. A dense
//! attention baseline, a FLOP/memory cost model, training on synthetic
//! pairs, and file formats for keypoints, weights, and match output round
//! out the pipeline.
//!
//! Module map:
//! - [`tensorcore`]: matrices, autodiff tape, eager/taped engines;
//! - [`seeding`]: nearest-neighbor seed selection, NMS, reseeding;
//! - [`sgnn`]: the seeded graph neural network (embedding, weighted
//!   attention, pooling / filtering / unpooling, two-stage forward);
//! - [`assignment`]: dustbin augmentation, log-domain Sinkhorn, match
//!   extraction;
//! - [`baseline`]: dense self/cross attention comparison arm;
//! - [`training`]: synthetic data, losses, Adam loop, evaluation;
//! - [`bench`]: analytic cost model and wall-clock harness;
//! - [`fileio`]: keypoint / weight / match / report formats.

pub mod assignment;
pub mod baseline;
pub mod bench;
mod bytesio;
pub mod error;
pub mod fileio;
pub mod seeding;
pub mod sgnn;
pub mod tensorcore;
pub mod training;

pub use error::{Error, Result};
