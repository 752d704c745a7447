//! Library backing the `ddsf` experiment driver.

pub mod config;
pub mod runner;
pub mod signals;
