//! Geometry-aided CSI acquisition and max-min precoding for near-field LoS MIMO.

pub mod channel;
pub mod crlb;
pub mod error;
pub mod estimation;
pub mod geometry;
pub mod grid;
pub mod harness;
pub mod linalg;
pub mod ota;
pub mod precoding;
pub mod units;

pub use error::{Error, Result};
