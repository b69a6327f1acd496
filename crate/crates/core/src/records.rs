//! JSON-lines record files: one self-delimiting object per line, each
//! carrying `format_version`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

/// Serialize `records` one per line.
pub fn to_jsonl<T: Serialize>(records: &[T]) -> Result<String> {
    let mut out = String::new();
    for rec in records {
        let line = serde_json::to_string(rec)
            .map_err(|e| Error::Invalid(format!("cannot serialize record: {e}")))?;
        out.push_str(&line);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    write_file(path, to_jsonl(records)?.as_bytes())
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Parse a JSON-lines file. Blank lines are skipped, keys outside `known`
/// are logged and ignored, and any other problem is reported with its
/// 1-based line number.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path, known: &[&str]) -> Result<Vec<T>> {
    let text = read_file(path)?;
    parse_jsonl(path, &text, known)
}

pub fn parse_jsonl<T: DeserializeOwned>(path: &Path, text: &str, known: &[&str]) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fail = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: lineno,
            message,
        };
        let value: serde_json::Value =
            serde_json::from_str(line).map_err(|e| fail(format!("malformed record: {e}")))?;
        let obj = value
            .as_object()
            .ok_or_else(|| fail("record is not an object".into()))?;
        match obj.get("format_version").and_then(|v| v.as_u64()) {
            Some(v) if v == u64::from(FORMAT_VERSION) => {}
            Some(v) => return Err(fail(format!("unsupported format_version {v}"))),
            None => return Err(fail("missing field `format_version`".into())),
        }
        for key in obj.keys() {
            if key != "format_version" && !known.contains(&key.as_str()) {
                log::warn!("{}:{lineno}: ignoring unknown field `{key}`", path.display());
            }
        }
        let rec = serde_json::from_value(value).map_err(|e| fail(e.to_string()))?;
        out.push(rec);
    }
    Ok(out)
}
