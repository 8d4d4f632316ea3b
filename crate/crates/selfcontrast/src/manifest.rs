//! Run manifest: which stage wrote which file, with content hashes.
//!
//! `manifest.json` sits at the root of a run directory. Each stage entry
//! lists the files that stage wrote, as `/`-separated paths relative to the
//! run directory, with their SHA-256 and size. Re-running a stage replaces
//! its entry. The manifest does not list itself.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::formats::{read_json, write_json, FormatError};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TOOL: &str = env!("CARGO_PKG_NAME");
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageEntry {
    pub started: String,
    pub finished: String,
    pub files: Vec<FileEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub tool: String,
    pub tool_version: String,
    pub config_hash: String,
    pub created: String,
    pub updated: String,
    pub stages: BTreeMap<String, StageEntry>,
}

/// Current UTC time in RFC 3339 with millisecond precision.
pub fn timestamp() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

pub fn sha256_file(path: &Path) -> io::Result<(String, u64)> {
    let mut file = fs::File::open(path)?;
    let mut hasher = Sha256::new();
    let bytes = io::copy(&mut file, &mut hasher)?;
    Ok((format!("{:x}", hasher.finalize()), bytes))
}

fn relative(dir: &Path, path: &Path) -> String {
    let rel = path.strip_prefix(dir).unwrap_or(path);
    rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/")
}

/// Every regular file under `dir`, as sorted relative paths, excluding the
/// manifest itself.
pub fn files_on_disk(dir: &Path) -> io::Result<BTreeSet<String>> {
    let mut out = BTreeSet::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = relative(dir, &path);
                if rel != MANIFEST_FILE {
                    out.insert(rel);
                }
            }
        }
    }
    Ok(out)
}

impl RunManifest {
    pub fn new(config_hash: &str) -> Self {
        let now = timestamp();
        RunManifest {
            tool: TOOL.to_string(),
            tool_version: TOOL_VERSION.to_string(),
            config_hash: config_hash.to_string(),
            created: now.clone(),
            updated: now,
            stages: BTreeMap::new(),
        }
    }

    pub fn path(dir: &Path) -> PathBuf {
        dir.join(MANIFEST_FILE)
    }

    /// Loads the manifest of `dir`, or starts a new one if there is none.
    pub fn load_or_new(dir: &Path, config_hash: &str) -> Result<Self, FormatError> {
        let path = Self::path(dir);
        if path.exists() {
            read_json(&path)
        } else {
            Ok(Self::new(config_hash))
        }
    }

    pub fn save(&mut self, dir: &Path) -> Result<(), FormatError> {
        self.updated = timestamp();
        write_json(&Self::path(dir), self)
    }

    /// Hashes `files` (absolute or relative to `dir`) and records them as the
    /// outputs of `stage`.
    pub fn record(&mut self, dir: &Path, stage: &str, started: String, files: &[PathBuf]) -> Result<(), FormatError> {
        let mut entries = Vec::with_capacity(files.len());
        for f in files {
            let abs = if f.is_absolute() { f.clone() } else { dir.join(f) };
            let (sha256, bytes) = sha256_file(&abs).map_err(|e| FormatError::io(&abs, e))?;
            entries.push(FileEntry { path: relative(dir, &abs), sha256, bytes });
        }
        entries.sort_by(|a, b| a.path.cmp(&b.path));
        self.stages.insert(stage.to_string(), StageEntry { started, finished: timestamp(), files: entries });
        Ok(())
    }

    /// All recorded files, keyed by path.
    pub fn files(&self) -> BTreeMap<&str, &FileEntry> {
        self.stages.values().flat_map(|s| s.files.iter().map(|f| (f.path.as_str(), f))).collect()
    }

    /// Problems found comparing the manifest with the files under `dir`:
    /// unlisted files, listed files that are missing, and hash mismatches.
    pub fn verify(&self, dir: &Path) -> io::Result<Vec<String>> {
        let mut problems = Vec::new();
        let listed = self.files();
        for path in files_on_disk(dir)? {
            if !listed.contains_key(path.as_str()) {
                problems.push(format!("{path}: not in manifest"));
            }
        }
        for (path, entry) in listed {
            match sha256_file(&dir.join(path)) {
                Ok((hash, _)) if hash == entry.sha256 => {}
                Ok(_) => problems.push(format!("{path}: hash mismatch")),
                Err(e) if e.kind() == io::ErrorKind::NotFound => problems.push(format!("{path}: missing")),
                Err(e) => return Err(e),
            }
        }
        Ok(problems)
    }
}
