//! Desk-scale Monte Carlo simulator of loading cold rubidium atoms from a
//! transported magnetic quadrupole trap into an intra-cavity optical dipole
//! trap, with the dispersive transmittance readout, hyperfine pump/repump
//! dynamics, parameter scans, and the analysis fits used to extract trapping
//! time and temperature.

pub mod analysis;
pub mod cli;
pub mod config;
pub mod constants;
pub mod dynamics;
pub mod error;
pub mod magnetics;
pub mod optics;
pub mod readout;
pub mod rng;
pub mod sequence;
pub mod units;
pub mod vec3;

pub use error::{Error, Result};
