//! Versioned stage directories and content hashes.
//!
//! Stage `s` writes into `<out>/<s>/vNNN/`; a version counts as complete once
//! its `stage.json` record exists. Completed versions are never modified.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::Stage;

pub const RECORD: &str = "stage.json";

fn versions(out: &Path, stage: Stage) -> Vec<(u32, PathBuf)> {
    let Ok(entries) = fs::read_dir(out.join(stage.as_str())) else {
        return Vec::new();
    };
    let mut found: Vec<(u32, PathBuf)> = entries
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            let n = name.strip_prefix('v')?.parse().ok()?;
            Some((n, e.path()))
        })
        .collect();
    found.sort();
    found
}

/// Newest completed version of `stage`.
pub fn latest(out: &Path, stage: Stage) -> Option<PathBuf> {
    versions(out, stage).into_iter().rev().map(|(_, p)| p).find(|p| p.join(RECORD).is_file())
}

/// Create the next version directory of `stage` (after any existing one,
/// complete or not).
pub fn next_version(out: &Path, stage: Stage) -> Result<PathBuf> {
    let n = versions(out, stage).last().map_or(1, |(n, _)| n + 1);
    let dir = out.join(stage.as_str()).join(format!("v{n:03}"));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

/// sha256 over git's blob framing: `"blob <len>\0" + content`.
pub fn content_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(&bytes);
    Ok(hex::encode(h.finalize()))
}

/// Hashes of every regular file in `dir` except the stage record, keyed by
/// path relative to `rel_to`.
pub fn hash_dir(dir: &Path, rel_to: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for e in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let p = e?.path();
        if p.is_file() && p.file_name().is_some_and(|n| n != RECORD) {
            out.insert(relative(&p, rel_to), content_hash(&p)?);
        }
    }
    Ok(out)
}

pub fn relative(p: &Path, base: &Path) -> String {
    p.strip_prefix(base).unwrap_or(p).display().to_string()
}

/// What a stage consumed and produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub dir: String,
    pub config_hash: String,
    pub seed: u64,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub wall_time_s: f64,
}

impl StageRecord {
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join(RECORD), self)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        read_json(&dir.join(RECORD))
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn versions_count_up_and_only_complete_ones_are_latest() {
        let tmp = tempfile::tempdir().unwrap();
        let out = tmp.path();
        assert!(latest(out, Stage::Smooth).is_none());
        let a = next_version(out, Stage::Smooth).unwrap();
        assert!(a.ends_with("smooth/v001"));
        assert!(latest(out, Stage::Smooth).is_none());
        fs::write(a.join(RECORD), "{}").unwrap();
        let b = next_version(out, Stage::Smooth).unwrap();
        assert!(b.ends_with("smooth/v002"));
        assert_eq!(latest(out, Stage::Smooth).unwrap(), a);
    }

    #[test]
    fn content_hash_matches_git_blob_framing() {
        let tmp = tempfile::tempdir().unwrap();
        let p = tmp.path().join("f");
        fs::write(&p, "hello\n").unwrap();
        let mut h = Sha256::new();
        h.update(b"blob 6\0hello\n");
        assert_eq!(content_hash(&p).unwrap(), hex::encode(h.finalize()));
    }
}
