//! Self-supervised object discovery and few-shot detection from posed RGB-D
//! frames.
//!
//! An agent that knows its own camera poses and sees depth can associate
//! class-agnostic object proposals across frames by reprojecting the depth
//! points of one proposal into another view. Those associations supervise a
//! metric-learning embedding; clustering the embedding space discovers object
//! instances, and a handful of labeled boxes turns the embedding into a
//! nearest-neighbor detector.
//!
//! The crate is organized around that pipeline:
//!
//! - [`geometry`]: pinhole camera model, point-in-box tests, cross-frame box
//!   reprojection and IoU.
//! - [`association`]: proposal matching across neighboring frames and triplet
//!   mining.
//! - [`metriclearn`]: the linear embedding head, triplet loss with analytic
//!   gradients, and an Adam training loop.
//! - [`discovery`]: mean-shift clustering and dominant-cluster
//!   precision/recall evaluation.
//! - [`detection`]: nearest-neighbor detection, few-shot sampling, and
//!   mAP evaluation.
//! - [`scenesim`]: a deterministic synthetic environment that stands in for
//!   a robot's RGB-D traversal.
//! - [`dataset`]: the on-disk dataset and artifact formats.
//! - [`pipeline`]: stage orchestration with content-hash caching.
//!
//! All world-space quantities are meters. Coordinates are right-handed; a
//! camera looks down its +z axis, pixel x grows right and pixel y grows down
//! with the origin at the top-left corner of the image.

pub mod association;
pub mod dataset;
pub mod detection;
pub mod discovery;
pub mod geometry;
pub mod metriclearn;
pub mod pipeline;
pub mod scenesim;
pub mod seed;

pub use association::{Frame, MatchPair, NeighborhoodSpec, Proposal, ProposalRef, Triplet};
pub use geometry::{BoundingBox, CameraPose, Intrinsics, PointCloud};
pub use metriclearn::{EmbeddingModel, TrainConfig};
