//! Small file helpers shared by the CSV/JSON writers.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Writes `contents` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::config(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(contents).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Formats a float with 17 significant digits so text round-trips exactly.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

pub(crate) fn parse_f64(tok: &str, path: &Path, line: usize) -> Result<f64> {
    let v: f64 = tok.trim().parse().map_err(|_| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: format!("not a number: {tok:?}"),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line,
            msg: format!("non-finite value: {tok:?}"),
        });
    }
    Ok(v)
}

pub(crate) fn parse_usize(tok: &str, path: &Path, line: usize) -> Result<usize> {
    tok.trim().parse().map_err(|_| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: format!("not a non-negative integer: {tok:?}"),
    })
}
