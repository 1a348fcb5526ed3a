//! MIMO-OFDM detection library.
//!
//! Implements the orthogonal-AMP detector family for real-decomposed MIMO
//! systems — exact-inversion and conjugate-gradient linear stages, the
//! unfolded trainable variant with four scalars per layer — together with
//! channel generation, a guard-interval-free receiver with decision-feedback
//! interference cancellation, a small finite-difference/Adam trainer for the
//! per-layer scalars, and a Monte-Carlo BER experiment harness.

pub mod cg;
pub mod detector;
pub mod channel;
pub mod constellation;
pub mod error;
pub mod trainer;

pub use error::{Error, Result};
