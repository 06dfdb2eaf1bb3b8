//! Deformable registration of longitudinal liver segmentation masks.

pub mod energy;
pub mod engine;
pub mod error;
pub mod grid;
pub mod io;
pub mod metrics;
pub mod phantom;
pub mod suite;
pub mod transforms;

pub use error::{Error, ErrorClass, Result};
