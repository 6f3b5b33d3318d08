//! Laser-to-vehicle extrinsic calibration.
//!
//! The crate estimates the SE(3) pose of a laser line scanner relative to a
//! vehicle's DVL-aided inertial navigation system from matched 3D keypoints
//! observed in overlapping point-cloud submaps. Three batch estimators are
//! provided, each trusting the navigation solution to a different degree:
//!
//! * [`calibrators::calibrate_alg1`] holds the vehicle trajectory fixed and
//!   solves for the extrinsic only.
//! * [`calibrators::calibrate_alg2`] additionally corrects one rigid central
//!   pose per submap (good local navigation, global drift).
//! * [`calibrators::calibrate_alg3`] lets every submap flex through a
//!   white-noise-on-acceleration motion prior (poor local navigation).
//!
//! All three carry a Tikhonov prior on the extrinsic so the problem stays
//! well posed when the vehicle barely rolls or pitches.
//!
//! Twists are ordered rotation first: `(phi, rho)`.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calibrators;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod factors;
pub mod lie;
pub mod metrics;
pub mod scene;
pub mod solver;
pub mod synth;

pub use error::{Error, Result};
pub use lie::{Pose, Rotation, Twist};
