//! 2D→3D human-pose lifting lab.
//!
//! The crate trains and compares three families of lifting models on
//! synthetic articulated-skeleton data:
//!
//! - **vanilla** — a Martinez-style residual MLP on flattened keypoints,
//! - **fully equivariant** — a vector-neuron network whose output rotates
//!   about the optical axis exactly when the 2D input rotates in-plane,
//! - **hybrid** — equivariant xy-prediction with an unconstrained depth head.
//!
//! Each family can be trained with or without random in-plane rotation
//! augmentation; the [`metrics`] module measures MPJPE, PA-MPJPE and the
//! equivariance residual, and [`harness`] orchestrates the full
//! data → train → eval → audit → report pipeline behind the CLI.

pub mod data;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod harness;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use geometry::{Pose2D, Pose3D, Rotation2, Rotation3, StandardizationStats};
pub use tensor::Tensor;
