//! Joint camera-to-robot calibration and metric-scale scene reconstruction.
//!
//! Inputs are dense per-view pointmaps with pixel correspondences and the
//! robot poses at which the images were taken. A single first-order
//! optimization aligns all views, estimates each camera's metric scale and
//! its rigid transform to the robot, and enforces rig rigidity between
//! cameras.

pub mod error;
pub mod eval;
pub mod geometry;
pub mod graph;
pub mod ground;
pub mod handeye;
pub mod io;
pub mod loss;
pub mod optimize;
pub mod pointmap;
pub mod scene;
pub mod synth;

pub use error::{Error, Result};
