//! Simulation library for on-demand beamsplitter gates between trapped-ion
//! motional modes: frequency-conversion ramps, invariant-based transforms,
//! two-mode symplectic bookkeeping and a grid propagator.

pub mod error;
pub mod experiments;
pub mod lewis_riesenfeld;
pub mod pulses;
pub mod quadrature;
pub mod states;
pub mod symplectic;
pub mod tdse;
pub mod units;

pub use error::{OdbError, Result};
