//! File formats and command-line front end for the expanding-variate
//! forecasting toolkit.
//!
//! [`evtsf_core`] works entirely in memory; this crate gives it a disk
//! surface and an operator surface:
//!
//! - [`dataset`]: a panel as `manifest.json` plus `values.csv` (one row per
//!   slot, one column per variable, empty cell = not yet observed);
//! - [`checkpoint`]: a trained model as one JSON file mapping canonical
//!   parameter names to shape + row-major data, bit-exact across a
//!   save/load roundtrip;
//! - [`report`]: run results as `metrics.json` (full) and `metrics.csv`
//!   (one row per run and variable group), curves as `curves.csv`;
//! - [`runconfig`]: the flat key/value run configuration with documented
//!   defaults and unknown-key rejection;
//! - [`cli`]: the `evtsf` binary's subcommands (`gen`, `train`, `eval`,
//!   `ablate`, `export-graph`).
//!
//! Every writer is deterministic — rerunning a command with the same inputs
//! and seed reproduces its output files byte for byte.

use std::fmt::Write as _;
use std::path::Path;

pub mod checkpoint;
pub mod cli;
pub mod dataset;
pub mod report;
pub mod runconfig;

/// Failures surfaced by this crate, split by who is at fault.
///
/// `Input` covers rejected configuration and unreadable or inconsistent
/// input files; `Runtime` covers failures while computing or writing
/// results. The `evtsf` binary exits 1 for the former and 2 for the latter
/// (0 on success) — a stable contract for scripting.
#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Runtime(String),
}

impl IoError {
    /// Process exit code for this failure class.
    pub fn exit_code(&self) -> i32 {
        match self {
            IoError::Input(_) => 1,
            IoError::Runtime(_) => 2,
        }
    }
}

impl From<evtsf_core::Error> for IoError {
    fn from(e: evtsf_core::Error) -> Self {
        if e.is_config() {
            IoError::Input(e.to_string())
        } else {
            IoError::Runtime(e.to_string())
        }
    }
}

pub type Result<T> = std::result::Result<T, IoError>;

/// Reads a user-supplied file, classifying failure as an input error that
/// names the path.
pub(crate) fn read_input(path: &Path) -> Result<String> {
    std::fs::read_to_string(path)
        .map_err(|e| IoError::Input(format!("cannot read {}: {e}", path.display())))
}

/// Writes an output file, classifying failure as a runtime error.
pub(crate) fn write_output(path: &Path, content: &str) -> Result<()> {
    std::fs::write(path, content)
        .map_err(|e| IoError::Runtime(format!("cannot write {}: {e}", path.display())))
}

/// Serializes a value as pretty JSON with a trailing newline — the one
/// JSON shape every file in this crate uses, so outputs stay byte-stable.
pub(crate) fn to_json_string<T: serde::Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)
        .map_err(|e| IoError::Runtime(format!("cannot serialize: {e}")))?;
    s.push('\n');
    Ok(s)
}

/// Formats a float with the shortest representation that parses back to
/// the same bits — the CSV counterpart of serde_json's float handling.
pub(crate) fn fmt_f64(x: f64) -> String {
    let mut s = String::new();
    write!(s, "{x}").expect("formatting a float cannot fail");
    s
}
