//! Multi-view 3D hand-body pose annotation.
//!
//! 2D detections from calibrated views are gated by confidence, triangulated
//! with confidence-weighted DLT, merged into one hand-body skeleton and
//! refined by fitting an articulated capsule model against the 3D keypoints
//! and per-view silhouettes. A seeded synthetic scene generator provides
//! ground truth for every stage.

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod confidence;
pub mod error;
pub mod evaluation;
pub mod fitting;
pub mod geometry;
pub mod io;
pub mod kinematics;
pub mod silhouette;
pub mod skeleton;
pub mod synth;
pub mod triangulation;

pub use error::{Error, Result};
pub mod pipeline;
