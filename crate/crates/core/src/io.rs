//! File helpers shared by the CSV and checkpoint formats.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Writes `bytes` to `path` through a sibling temp file and a rename, so
/// readers never observe a partially written output.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = tmp_path(path);
    let res = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = res {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(format!(".tmp{}", std::process::id()));
    path.with_file_name(name)
}

/// Reads a CSV made of one header line and rows of unsigned decimal
/// integers. Returns the header columns and the flattened rows. Line numbers
/// in errors are 1-based and count the header.
pub(crate) fn read_int_csv(path: &Path) -> Result<(Vec<String>, Vec<u32>, usize)> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let header = match lines.next() {
        Some(l) => l.map_err(|e| Error::io(path, e))?,
        None => return Err(parse_err(1, "empty file, expected a header".into())),
    };
    let columns: Vec<String> = header.trim().split(',').map(|s| s.trim().to_string()).collect();
    let width = columns.len();
    let mut values = Vec::new();
    let mut rows = 0usize;
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut n = 0usize;
        for field in line.split(',') {
            let v: u32 = field.trim().parse().map_err(|_| {
                parse_err(lineno, format!("row {}: bad integer field {field:?}", rows + 1))
            })?;
            values.push(v);
            n += 1;
        }
        if n != width {
            return Err(parse_err(
                lineno,
                format!("row {}: expected {width} fields, found {n}", rows + 1),
            ));
        }
        rows += 1;
    }
    Ok((columns, values, rows))
}
