//! Canonical JSON files with a versioned header.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormatVersion {
    pub major: u32,
    pub minor: u32,
}

pub const CURRENT_VERSION: FormatVersion = FormatVersion { major: 1, minor: 0 };

/// Serializes with sorted keys and a trailing newline, so equal values give equal bytes.
pub fn to_canonical_string<T: Serialize>(value: &T) -> std::result::Result<String, serde_json::Error> {
    // Value keeps objects in a BTreeMap, which sorts the keys.
    let v = serde_json::to_value(value)?;
    let mut s = serde_json::to_string_pretty(&v)?;
    s.push('\n');
    Ok(s)
}

pub fn write_canonical<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let s = to_canonical_string(value).map_err(|e| Error::format(path, e.to_string()))?;
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Reads a file carrying `format_version` and `required`. Newer minor versions
/// load with unknown optional fields ignored; a different major version or a
/// required field outside `known` is an error.
pub fn read_versioned<T: DeserializeOwned>(path: &Path, known: &[&str]) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    let version: FormatVersion = value
        .get("format_version")
        .cloned()
        .ok_or_else(|| Error::format(path, "missing format_version"))
        .and_then(|v| serde_json::from_value(v).map_err(|e| Error::format(path, format!("format_version: {e}"))))?;
    if version.major != CURRENT_VERSION.major {
        return Err(Error::format(
            path,
            format!("format version {}.{} is not readable by this build ({}.x)", version.major, version.minor, CURRENT_VERSION.major),
        ));
    }
    if let Some(required) = value.get("required").and_then(|r| r.as_array()) {
        for field in required {
            let name = field.as_str().unwrap_or_default();
            if !known.contains(&name) {
                return Err(Error::format(path, format!("required field '{name}' is not supported")));
            }
        }
    }
    serde_json::from_value(value).map_err(|e| Error::format(path, e.to_string()))
}

/// SHA-256 over the names and contents of `paths`; missing files hash as absent.
pub fn digest_files(paths: &[PathBuf]) -> Result<String> {
    let mut h = Sha256::new();
    for p in paths {
        let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        match fs::read(p) {
            Ok(bytes) => {
                h.update([1u8]);
                h.update((bytes.len() as u64).to_le_bytes());
                h.update(&bytes);
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => h.update([0u8]),
            Err(e) => return Err(Error::io(p, e)),
        }
    }
    Ok(hex::encode(h.finalize()))
}
