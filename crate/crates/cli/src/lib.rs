//! Experiment runner behind the `dualrec` binary: run configuration,
//! subcommands and report emission.

// `!(x > 0)` style checks are deliberate: NaN has to fail validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod report;

pub use config::{ConfigError, FieldError, Overrides, RunConfig};
pub use report::{emit_report, ReportContext, ReportShape, INCOMPLETE_MARKER};
