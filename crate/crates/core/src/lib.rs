//! Link-level models for a bistatic, frequency-shifted OFDM backscatter link.
//!
//! The crate is organised bottom-up: [`signalcore`] holds transforms and
//! kernels, [`waveform`], [`channel`] and [`tag`] describe the transmit side
//! and propagation, [`receiver`] the reader front end and DSP chain,
//! [`ranging`] and [`crlb`] the range estimators and their bounds. [`link`]
//! ties everything together into an end-to-end capture simulator.

// `!(x > 0.0)` is used on purpose: NaN must fail validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod channel;
pub mod crlb;
pub mod error;
pub mod link;
pub mod ranging;
pub mod receiver;
pub mod signalcore;
pub mod tag;
pub mod waveform;

pub use error::{Error, Result};
pub use num_complex::Complex64;

/// Speed of light in vacuum, m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;
