pub mod decode;
pub mod ingest;
pub mod metrics;
pub mod train;
pub mod verify;

use std::path::{Path, PathBuf};

use crate::CliError;

pub(crate) fn ensure_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", path.display())))
}

pub(crate) fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    std::fs::write(path, text)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

/// File name for one decode grid cell.
pub(crate) fn cell_file(strategy: &str, block_length: usize, bias: bool) -> PathBuf {
    let suffix = if bias { "_bias" } else { "" };
    PathBuf::from(format!("corpus_{strategy}_B{block_length}{suffix}.jsonl"))
}

pub(crate) fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}
