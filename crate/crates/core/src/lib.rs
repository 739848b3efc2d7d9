//! Desk-scale toolkit for learning a heavily-degraded prior for underwater
//! perception.
//!
//! The pipeline, end to end: synthesize paired clean/degraded scenes
//! ([`imaging`]), estimate per-pixel transmission with the underwater dark
//! channel ([`imaging`]), slice images into patches and split them into
//! heavily/lightly degraded subsets by a transmission threshold
//! ([`partition`]), push patches through a small frozen two-stage feature
//! extractor ([`extractor`]), train a residual feature transference module
//! that maps degraded-patch features onto detector-friendly ones ([`rftm`],
//! [`training`]), and quantify how far the feature-distribution gap closed
//! ([`analysis`]).
//!
//! Everything is seeded and single-threaded: identical inputs produce
//! bitwise-identical outputs, including every file the toolkit emits.

pub mod analysis;
pub mod classify;
pub mod config;
pub mod corpus;
pub mod error;
pub mod extractor;
pub mod gradcheck;
pub mod imaging;
pub mod partition;
pub mod rftm;
pub mod tensor;
pub mod tnsr;
pub mod training;
pub mod util;

pub use error::{Error, Result};
