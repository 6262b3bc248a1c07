//! Stochastic-differential-equation models of SGD in deep linear networks.

pub mod dynamics;
pub mod error;
pub mod model;
pub mod modes;
pub mod noisecov;
pub mod numerics;
pub mod stationary;

pub use error::{Error, Result};
