//! Outlier identification and removal for TDOA (range-difference)
//! measurements acquired at sensor arrays.
//!
//! The pipeline tests single TDOAs against their feasible interval, then
//! groups of two TDOAs sharing a sensor and triples closing a loop of
//! sensors against simplified feasible regions, and finally fuses the group
//! p-values with per-TDOA Benjamini-Hochberg adjustment and Fisher
//! combination to remove outliers one (or a tied few) at a time.

pub mod error;
pub mod geometry;
pub mod localization;
pub mod removal;
pub mod simharness;
pub mod stattests;

pub use error::{Error, Result};
pub use geometry::{PairIndex, Point3, SensorArray, TdoaSet};
