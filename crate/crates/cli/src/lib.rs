//! Replication pipeline around `panelkit`: ingest county CSVs into a workspace, run
//! declarative model specs, test residuals for cross-sectional dependence, build the
//! county typology and dump synthetic panels.

pub mod commands;
pub mod config;
pub mod error;
pub mod io;
pub mod manifest;
pub mod report;

pub use error::{CliError, Result};
