//! Content-addressed stage stamps: a stage is skipped when its stamp records
//! the same input key and all of its outputs still exist.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const STAMP_FILE: &str = ".stamp.json";

/// Hex SHA-256 over the JSON form of `v` and the crate version.
pub fn digest(v: &impl Serialize) -> Result<String> {
    let mut h = Sha256::new();
    h.update(env!("CARGO_PKG_VERSION").as_bytes());
    h.update(serde_json::to_vec(v)?);
    Ok(hex::encode(h.finalize()))
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::at(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

#[derive(Serialize, Deserialize)]
struct Stamp {
    stage: String,
    key: String,
}

fn stamp_path(dir: &Path, stage: &str) -> PathBuf {
    dir.join(format!("{STAMP_FILE}.{stage}"))
}

pub fn is_fresh(dir: &Path, stage: &str, key: &str, outputs: &[PathBuf]) -> bool {
    let Ok(text) = fs::read_to_string(stamp_path(dir, stage)) else {
        return false;
    };
    let Ok(stamp) = serde_json::from_str::<Stamp>(&text) else {
        return false;
    };
    stamp.stage == stage && stamp.key == key && outputs.iter().all(|p| p.exists())
}

pub fn seal(dir: &Path, stage: &str, key: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::at(dir, e))?;
    let p = stamp_path(dir, stage);
    let stamp = Stamp { stage: stage.into(), key: key.into() };
    fs::write(&p, serde_json::to_vec(&stamp)?).map_err(|e| Error::at(&p, e))
}

pub fn invalidate(dir: &Path, stage: &str) {
    let _ = fs::remove_file(stamp_path(dir, stage));
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stamps_track_key_and_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("out.txt");
        assert!(!is_fresh(dir.path(), "s", "k", &[]));
        seal(dir.path(), "s", "k").unwrap();
        assert!(is_fresh(dir.path(), "s", "k", &[]));
        assert!(!is_fresh(dir.path(), "s", "other", &[]));
        assert!(!is_fresh(dir.path(), "s", "k", &[out.clone()]));
        fs::write(&out, "x").unwrap();
        assert!(is_fresh(dir.path(), "s", "k", &[out]));
        invalidate(dir.path(), "s");
        assert!(!is_fresh(dir.path(), "s", "k", &[]));
        assert_eq!(digest(&(1, "a")).unwrap(), digest(&(1, "a")).unwrap());
        assert_ne!(digest(&(1, "a")).unwrap(), digest(&(2, "a")).unwrap());
    }
}
