//! Near-field beamfocusing toolkit.
//!
//! The crate simulates spherical-wave channels between an extremely large
//! base-station array, a reconfigurable intelligent surface (RIS) and a
//! single-antenna device, builds polar-grid beam codebooks, produces
//! beam-scan feedback maps, and trains a small attention-based network that
//! regresses the device position from a scan map.
//!
//! Module map:
//!
//! - [`geometry`]: polar/Cartesian frames, array layouts, Rayleigh distance.
//! - [`channel`]: channel synthesis, cascade gain, RIS phase focusing, noise.
//! - [`codebook`]: coarse and fine polar codebooks, RIS-frame conversion.
//! - [`beamscan`]: received power, scan maps, datasets, physical metrics.
//! - [`nn`]: the position-detector network with hand-written backprop.
//! - [`training`]: splitting, the training loop, accuracy metrics.
//! - [`harness`]: presets, experiments, reports and the CLI plumbing.

// Negated comparisons are used on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod beamscan;
pub mod channel;
pub mod codebook;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod nn;
pub mod training;

pub use error::{Error, Result};

/// Speed of light in vacuum, m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

pub type Complex = num_complex::Complex64;
