//! Optimal withdrawal and allocation for pension decumulation.

pub mod bootstrap;
pub mod control;
pub mod engine;
pub mod error;
pub mod fourier;
pub mod market;
pub mod selftest;
pub mod simulate;

pub use error::{Error, Result};
