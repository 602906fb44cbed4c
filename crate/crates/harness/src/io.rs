use std::io::Write;
use std::path::Path;

use crate::error::{HarnessError, Result};

/// Writes via a temp file in the same directory so readers never observe a
/// partial file. Creates missing parent directories.
pub fn write_atomic(path: &Path, content: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(d) = dir {
        std::fs::create_dir_all(d)?;
    }
    let mut tmp = tempfile::NamedTempFile::new_in(dir.unwrap_or(Path::new(".")))?;
    tmp.write_all(content)?;
    tmp.persist(path)
        .map_err(|e| HarnessError::Io(e.error))?;
    Ok(())
}

/// Joins one CSV row; floats print in shortest round-trip form so repeated
/// runs produce byte-identical files.
pub fn csv_row(fields: &[String]) -> String {
    let mut s = fields.join(",");
    s.push('\n');
    s
}

pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}
