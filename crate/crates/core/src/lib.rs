//! Multi-agent collaborative detection under feature-map attacks, and the
//! MADE malicious agent detector.

pub mod error;
pub mod attack;
pub mod defense;
pub mod geometry;
pub mod pipeline;
pub mod rng;
pub mod scene;

pub use error::{CoreError, Result};
