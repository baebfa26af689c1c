//! Command-line harness around `pillars-core`: configuration files, synthetic
//! scenes, brute-force oracles, planted-object weights, detection records and
//! benchmark reports.

pub mod bench;
pub mod checks;
pub mod cli;
pub mod config;
pub mod error;
pub mod oracle;
pub mod planted;
pub mod records;
pub mod synth;

pub use error::{HarnessError, Result};
