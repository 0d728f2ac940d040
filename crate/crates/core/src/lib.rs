//! Numerical laboratory for quantum state tomography with random circuits.
//!
//! The crate is organised bottom-up:
//!
//! * [`hilbert`]: dense composite-system states, operators, partial traces and norms.
//! * [`frames`]: observable measures, sampling operators and tight-frame defects.
//! * [`designs`]: second-moment (twirl) operators, design distances and spectral gaps.
//! * [`circuits`]: parallel brickwork random circuits and their gate ensembles.
//! * [`lattice`]: truncated bosonic chains, Bose-Hubbard gates and time-of-flight data.
//! * [`recon`]: measurement simulation, trace-norm reconstruction and local tomography.
//! * [`experiments`]: configuration-driven pipelines used by the `tomolab` binary.

pub mod circuits;
pub mod designs;
pub mod error;
pub mod experiments;
pub mod frames;
pub mod hilbert;
pub mod lattice;
pub mod recon;
pub mod rng;

pub use error::{Error, Result};
pub use hilbert::{CMat, DensityMatrix, Observable, SystemShape, Tolerances, Unitary, C64};
