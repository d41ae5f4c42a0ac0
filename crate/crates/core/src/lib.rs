//! Perception-aware mast planning for a rover on a simulated planar world.
//!
//! The pipeline maps the ground from camera images into a per-cell intensity
//! belief, predicts the most likely images at candidate future mast poses,
//! scores them with visual-odometry based metrics, and plans mast motions
//! with a spatio-temporal RRT* inside a receding-horizon loop.

pub mod belief;
pub mod error;
pub mod exec;
pub mod geometry;
pub mod harness;
pub mod image;
pub mod planner;
pub mod prediction;
pub mod seed;
pub mod vision;
pub mod world;

pub use error::{Error, Result};
pub use exec::Exec;
pub use geometry::{BodyPose, CameraIntrinsics, ExtendedState, GroundPoint, Homography, MastConfig};
pub use image::GrayImage;
