//! Branched harmonic majorants, iterated envelopes and optimal stopping of
//! Brownian motion absorbed at the boundary of the unit ball.

pub mod error;
pub mod gain;
pub mod geometry;
pub mod config;
pub mod envelope;
pub mod harmonic;
pub mod hull;
pub mod majorant;
pub mod oracle;
pub mod pathsim;
pub mod quadrature;

pub use error::{Error, Result};
