//! Joint localization and beamforming for RIS-aided mmWave links.
//!
//! The crate simulates a multi-BS downlink reflected by one reconfigurable
//! intelligent surface, estimates the channel gains and the full location
//! vector from the received pilots, and designs transmit beams and RIS
//! phases that minimize the Cramér-Rao bound of that estimate.

pub mod beamformer;
pub mod channel;
pub mod driver;
pub mod error;
pub mod fim;
pub mod gains;
pub mod geometry;
pub mod harness;
pub mod linalg;
pub mod location;
mod sensitivity;
pub mod signal;

pub use channel::C64;
pub use error::{JlboError, Result};
