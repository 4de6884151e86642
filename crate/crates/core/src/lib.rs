//! Multi-camera, multi-person markerless motion capture.
//!
//! The engine predicts each subject's next 3D pose, picks a camera per
//! viewpoint, searches a small 3D lattice around every predicted keypoint for
//! the point of highest summed part confidence, and fits a kinematic skeleton
//! to the result in two inverse-kinematics passes (confidence-weighted, then
//! range-of-motion constrained after low-pass smoothing).

pub mod calibration;
pub mod camera;
pub mod error;
pub mod ik;
pub mod init;
pub mod metrics;
pub mod motion;
pub mod pcm;
pub mod pipeline;
pub mod scene;
pub mod skeleton;
pub mod tracker;

pub use error::{Error, Result};
