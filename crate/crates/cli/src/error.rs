//! Machine-readable failure reports.

use std::fmt;
use std::path::PathBuf;

use serde_json::{json, Value};

#[derive(Debug)]
pub enum CliError {
    MissingInput { what: &'static str, path: PathBuf, hint: &'static str },
    InconsistentGrids(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::MissingInput { what, path, hint } => write!(f, "missing {what} at {}: {hint}", path.display()),
            CliError::InconsistentGrids(msg) => write!(f, "inconsistent grids: {msg}"),
        }
    }
}

impl std::error::Error for CliError {}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::MissingInput { .. } => "missing_input",
            CliError::InconsistentGrids(_) => "inconsistent_grids",
        }
    }
}

/// `{"status": "error", "kind", "message", "causes"}`; `kind` is taken from the innermost
/// typed error in the chain.
pub fn error_json(e: &anyhow::Error) -> Value {
    let kind = e
        .chain()
        .filter_map(|c| {
            c.downcast_ref::<CliError>()
                .map(CliError::kind)
                .or_else(|| c.downcast_ref::<vtrack::Error>().map(vtrack::Error::kind))
                .or_else(|| c.downcast_ref::<serde_json::Error>().map(|_| "json"))
                .or_else(|| c.downcast_ref::<std::io::Error>().map(|_| "io"))
        })
        .last()
        .unwrap_or("error");
    json!({
        "status": "error",
        "kind": kind,
        "message": e.to_string(),
        "causes": e.chain().skip(1).map(|c| c.to_string()).collect::<Vec<_>>(),
    })
}
