//! Deterministic JSON and CSV emission.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::{invalid, CliError, CliResult};

pub fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| invalid(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// CSV whose first line is `# format_version=1 config_hash=<hash>`.
pub fn write_csv<T: Serialize>(path: &Path, config_hash: &str, rows: &[T]) -> CliResult<()> {
    let mut buf = format!("# format_version={} config_hash={config_hash}\n", crate::dump::FORMAT_VERSION).into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        for row in rows {
            w.serialize(row).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        }
        w.flush().map_err(|e| CliError::io(path, e))?;
    }
    fs::write(path, buf).map_err(|e| CliError::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))
}
