//! Face detection driven by a fixed 3D mean face.
//!
//! A small ConvNet labels every cell of a half-resolution grid with one of
//! ten facial keypoints (or background) and regresses an 8-parameter
//! projected transform of the mean face. Each keypoint cell therefore
//! proposes a whole face top-down; proposals are scored by the summed log
//! probability of their keypoints, pruned with an asymmetric-overlap NMS and
//! refined by a bounding-box head fed from features pooled at the predicted
//! keypoints.
//!
//! The crate is `no_std` (it needs `alloc`). File formats and the command
//! line live in the `mf3d` companion crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod detector;
mod error;
pub mod evaluation;
pub mod geometry;
pub mod gradcheck;
pub mod losses;
pub mod network;
pub mod proposals;
pub mod training;

pub use error::{Error, Result};
pub use geometry::{BoundingBox, Ellipse, Keypoints2D, MeanFace3D, Point2, TransformParams};
pub use network::{FeatureMap, Model, ModelConfig, ModelParams};
pub use proposals::{DenseOutputs, FaceProposal};

/// Number of facial keypoints.
pub const NUM_KEYPOINTS: usize = 10;
/// Keypoint labels plus the background class (label 0).
pub const NUM_CLASSES: usize = NUM_KEYPOINTS + 1;
/// Ratio between image coordinates and the working grid.
pub const GRID_SCALE: f64 = 2.0;
