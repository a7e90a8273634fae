//! Channel estimation and localization for near-field extremely large
//! antenna arrays under hybrid analog/digital OFDM reception.
//!
//! The received pilot block of every uplink frame is a third-order tensor
//! (subcarrier × RF chain × symbol). Line-of-sight scenarios follow a CPD
//! model, multipath scenarios a block-term model. Factors are fitted by
//! ALS or Levenberg–Marquardt, then mapped back to path delays, angles,
//! distances and gains via dictionary matching.

pub mod btd;
pub mod cpd;
pub mod crb;
pub mod error;
pub mod extract;
pub mod geometry;
pub mod harness;
pub mod linalg;
pub mod pilots;
pub mod pipeline;
pub mod signal;
pub mod somp;
pub mod tensor;

pub use error::{Error, Result};
