//! Batch driver for the `mbsde` solvers: reads a TOML problem file, runs the
//! requested scheme(s) and writes JSON or CSV reports.

pub mod config;
pub mod error;
pub mod report;
pub mod run;

use std::path::{Path, PathBuf};

pub use config::{parse, Format, Mode, ProblemConfig};
pub use error::CliError;
pub use run::{execute, Overrides, RunReport, Timings};

/// Reads, runs and writes; returns the files written.
pub fn run_file(path: &Path, overrides: &Overrides) -> Result<Vec<PathBuf>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|source| CliError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    let mut config = parse(&text)?;
    overrides.apply(&mut config);
    let (report, timings) = execute(&config)?;
    report::emit(&report, &timings, &config.output.dir, config.output.format)
}
