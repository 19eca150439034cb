//! Geometry-aware salient object detection on point clouds.
//!
//! The crate is organised bottom-up:
//!
//! - [`pcio`] – point-cloud data model, PLY I/O, 9-channel input features and
//!   synthetic scene generation.
//! - [`spatial`] – voxel reduction, grid-bucketed kNN, farthest-point sampling
//!   and local-area construction.
//! - [`superpoint`] – greedy queue-based superpoint partition plus pooling and
//!   inverse mapping.
//! - [`ad`] – a small dense reverse-mode differentiation tape.
//! - [`model`] – per-point feature extractor, superpoint-point cross attention
//!   with residual inverse mapping, and the prediction head.
//! - [`losses`] – pull/push class-agnostic loss and cross-entropy.
//! - [`metrics`] – MAE, F-measure, E-measure, IoU and threshold sweeps.
//! - [`train`] – Adam, augmentation, the training loop and the ablation and
//!   density harnesses.
//! - [`gradcheck`] – the finite-difference suite behind `geosal gradcheck`.
//! - [`cli`] – subcommand implementations behind the `geosal` binary.

pub mod ad;
pub mod cli;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod pcio;
pub mod spatial;
pub mod superpoint;
pub mod train;

pub use error::{Error, Result};
