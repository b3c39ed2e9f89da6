//! Command-line driver, artifact persistence and convergence studies.

pub mod cli;
pub mod config;
pub mod error;
pub mod persist;
pub mod study;

pub use error::HarnessError;
