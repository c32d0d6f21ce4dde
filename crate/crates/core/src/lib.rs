//! Time- and frequency-resolved simulation of entanglement-based time-bin
//! QKD systems.
//!
//! The crate models photon-pair sources (type-0 and type-II down-conversion)
//! through the Gaussian covariance formalism, propagates the state through
//! fibers, wavelength channels and receiver interferometers, and evaluates
//! click statistics of imperfect single-photon detectors (dark counts, dead
//! times, afterpulses) to obtain sifted key rates and quantum bit error
//! rates.

pub mod covariance;
pub mod detection;
pub mod error;
pub mod grid;
pub mod jsa;
pub mod linalg;
pub mod optics;
pub mod oracle;
pub mod scenario;
pub mod wdm;

pub use error::{Error, ErrorClass, Result};
