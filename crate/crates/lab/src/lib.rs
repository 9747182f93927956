//! Command-line harness around `exvar-core`: configuration, observables,
//! experiments and plot-ready output with run manifests.

pub mod commands;
pub mod config;
pub mod error;
pub mod experiments;
pub mod observable;
pub mod output;

pub use error::{LabError, LabResult};
