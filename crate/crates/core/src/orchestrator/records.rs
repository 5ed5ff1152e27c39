//! Append-only JSONL record files.
//!
//! Every write is one complete line. A crash can at worst leave a torn
//! final line without its newline; readers ignore it and the next append
//! truncates it away.

use std::fs::{self, File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptLine {
    pub path: PathBuf,
    pub line: usize,
    pub error: String,
}

#[derive(Debug)]
pub struct JsonlContents<T> {
    pub items: Vec<T>,
    pub corrupt: Vec<CorruptLine>,
    pub torn_tail: bool,
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<JsonlContents<T>> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Ok(JsonlContents { items: Vec::new(), corrupt: Vec::new(), torn_tail: false })
        }
        Err(e) => return Err(Error::io(path, e)),
    };
    let complete = match text.rfind('\n') {
        Some(i) => &text[..=i],
        None => "",
    };
    let torn_tail = complete.len() < text.len();
    let mut items = Vec::new();
    let mut corrupt = Vec::new();
    for (i, line) in complete.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(v) => items.push(v),
            Err(e) => corrupt.push(CorruptLine { path: path.to_path_buf(), line: i + 1, error: e.to_string() }),
        }
    }
    Ok(JsonlContents { items, corrupt, torn_tail })
}

fn repair_tail(file: &mut File, path: &Path) -> Result<()> {
    let len = file.metadata().map_err(|e| Error::io(path, e))?.len();
    if len == 0 {
        return Ok(());
    }
    let mut last = [0u8; 1];
    file.seek(SeekFrom::Start(len - 1)).map_err(|e| Error::io(path, e))?;
    file.read_exact(&mut last).map_err(|e| Error::io(path, e))?;
    if last[0] == b'\n' {
        return Ok(());
    }
    let mut bytes = Vec::new();
    file.seek(SeekFrom::Start(0)).map_err(|e| Error::io(path, e))?;
    file.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    let keep = bytes.iter().rposition(|b| *b == b'\n').map_or(0, |i| i + 1);
    log::warn!("truncating torn final line of {}", path.display());
    file.set_len(keep as u64).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Appends `value` as one JSON line, creating parent directories as needed.
pub fn append_jsonl<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut file =
        OpenOptions::new().read(true).append(true).create(true).open(path).map_err(|e| Error::io(path, e))?;
    repair_tail(&mut file, path)?;
    let mut line = serde_json::to_vec(value)?;
    line.push(b'\n');
    file.write_all(&line).map_err(|e| Error::io(path, e))?;
    file.flush().map_err(|e| Error::io(path, e))
}

/// Writes `bytes` to `path` through a temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tmp = dir.join(format!(".{}.tmp", path.file_name().and_then(|n| n.to_str()).unwrap_or("file")));
    {
        let mut f = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
