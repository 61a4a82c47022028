//! Feedforward quantum-noise reduction with twin beams: analytic noise
//! model, four-wave-mixing source presets, a time-domain Monte Carlo of the
//! feedforward chain, and spectrum-analyzer emulation.

pub mod error;
pub mod feedforward_sim;
pub mod fwm_source;
pub mod noise_model;
pub mod spectral;

pub use error::{Error, Result};
