//! Random invariant manifolds for spectrally truncated stochastic parabolic
//! equations with linear multiplicative Stratonovich noise.
//!
//! The crate is organised bottom-up:
//!
//! - [`noise`]: two-sided Wiener paths, the shift flow and stationary
//!   Ornstein–Uhlenbeck processes driven by them.
//! - [`spectral`]: the truncated eigenbasis of the linear operator and the
//!   unstable/stable splitting.
//! - [`linear`]: the diagonal linear random cocycle, Lyapunov exponents and
//!   nonuniform dichotomy constants.
//! - [`nonlinear`]: nonlinear fields, the smooth cut-off and the
//!   exponential-Euler mild-solution integrator.
//! - [`perron`]: the Lyapunov–Perron fixed-point solver for pseudo-unstable
//!   and pseudo-stable manifold graphs.
//! - [`transform`]: the Ornstein–Uhlenbeck conjugation between the
//!   stochastic equation and a random equation without white noise.
//! - [`run`]: configuration files and the experiment driver behind the CLI.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod error;
pub mod linear;
pub mod noise;
pub mod nonlinear;
pub mod par;
pub mod perron;
pub mod run;
pub mod spectral;
pub mod stats;
pub mod transform;

pub use error::{Error, Result};
pub use spectral::{Side, SpectralModel, Splitting, StateVector};
