//! Forcing-conditioned climate emulation at desk scale.
//!
//! The crate bundles a deterministic toy earth-system model that produces
//! ground-truth scenario datasets, a harmonic + AR(1) statistical baseline
//! (MESMER-M), a small forcing-conditioned emulator with a flow-matching
//! residual head trained by hand-written backpropagation, autoregressive
//! rollouts, and the verification diagnostics used to compare them.

pub mod dataio;
pub mod emulator;
pub mod error;
pub mod grid;
pub mod losses;
pub mod mesmerm;
pub mod metrics;
pub mod rollout;
pub mod toyesm;

pub use error::{Error, Result};
