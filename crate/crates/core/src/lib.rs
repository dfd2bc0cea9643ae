//! Simulation and analysis toolkit for microwave up-conversion chains used in
//! superconducting-qubit control.
//!
//! The crate models two ways of producing a gigahertz drive pulse from
//! digitally defined envelopes:
//!
//! * an IQ mixer, where image and carrier leakage are cancelled by
//!   interference and must be calibrated ([`mixers`], [`calib`]);
//! * a double frequency conversion chain, where fixed analog filters remove
//!   image and carrier ([`chains`]).
//!
//! Signal quality is quantified by spectra and SFDR, and end-to-end by
//! randomized benchmarking on a simulated three-level transmon
//! ([`qutrit`]) with three-state readout discrimination ([`readout`]).

pub mod calib;
pub mod chains;
pub mod cli;
pub mod error;
pub mod fit;
pub mod mixers;
pub mod qutrit;
pub mod readout;
pub mod signal;
pub mod stand_in;

pub use error::{Error, Result};
