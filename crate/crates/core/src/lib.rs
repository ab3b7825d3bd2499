//! Lesion detection trained from a few box-annotated images plus many
//! image-level labels, with a scheduled weight on the weak loss.

pub mod active;
pub mod data;
pub mod detector;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod harness;
pub mod rng;
pub mod schedule;
pub mod weak;

pub use error::{Error, Result};
