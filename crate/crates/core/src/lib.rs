//! Weakly supervised semantic boundary detection from class attention maps.
//!
//! The pipeline turns image-level class labels into per-pixel semantic
//! boundary labels:
//!
//! 1. [`synthgen`] renders scenes with known ground truth and simulated CAMs.
//! 2. [`seeds`] thresholds CAMs into confident object/background regions.
//! 3. [`segments`] enumerates short line segments between confident pixels and
//!    labels each one with the classes whose boundary it must cross.
//! 4. [`mil`] scores each segment by its maximum boundary response and turns
//!    the labels into losses for the two output branches of [`net`].
//! 5. [`pseudolabel`] aggregates multi-scale predictions, drops classes absent
//!    from the image, thins and binarizes them.
//! 6. [`student`] retrains a fresh network on those pseudo labels and [`eval`]
//!    scores everything against ground truth.

pub mod config;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod imaging;
pub mod mil;
pub mod net;
pub mod pseudolabel;
pub mod real;
pub mod seeds;
pub mod segments;
pub mod student;
pub mod synthgen;

pub use error::{Error, Result};
pub use real::Real;
