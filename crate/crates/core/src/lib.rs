//! Camera-centric 3D multi-person pose estimation: heatmap decoding,
//! top-down / bottom-up matching and fusion, self-supervised consistency
//! losses, test-time trajectory optimization and evaluation.
//!
//! The numeric core is generic over [`Real`] (`f32` or `f64`); the aliases
//! below fix it to `f64`.

pub mod assignment;
pub mod camera;
pub mod config;
pub mod discriminator;
pub mod error;
pub mod fusion;
pub mod heatmap;
pub mod io;
pub mod matching;
pub mod metrics;
pub mod pipeline;
pub mod procrustes;
pub mod scalar;
pub mod skeleton;
pub mod ssl;
pub mod synth;
pub mod tto;

pub use error::{Error, Result};
pub use scalar::{Real, Vec3};
pub use skeleton::{Frame, SkeletonSpec};

pub type Vec3d = scalar::Vec3<f64>;
pub type Pose2d = skeleton::Pose2D<f64>;
pub type Pose3d = skeleton::Pose3D<f64>;
pub type Track = skeleton::TrackSequence<f64>;
pub type Camera = camera::CameraIntrinsics<f64>;
pub type Heatmaps = heatmap::HeatmapStack<f64>;
