//! Run manifests and content hashing.
//!
//! File hashes follow git's blob scheme (`blob <len>\0<bytes>`) with SHA-256;
//! a directory hash is the SHA-256 of its sorted `<hash>  <relative path>`
//! lines, like a flattened tree object.

use std::path::{Path, PathBuf};

use fia_vton::ModelConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct OutputEntry {
    pub path: String,
    pub hash: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config: Option<ModelConfig>,
    pub seed: u64,
    /// Hash over every input file or directory, in argument order.
    pub input_hash: String,
    pub inputs: Vec<String>,
    /// Hash over `outputs`.
    pub content_hash: String,
    pub outputs: Vec<OutputEntry>,
    pub wall_ms: u64,
    pub threads: usize,
    /// Command-specific details (setting, sample ids, stage reports).
    pub details: Value,
}

pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

fn tree_hash<'a>(entries: impl IntoIterator<Item = (&'a str, &'a str)>) -> String {
    let mut h = Sha256::new();
    for (path, hash) in entries {
        h.update(format!("{hash}  {path}\n").as_bytes());
    }
    hex::encode(h.finalize())
}

/// Hashes of every file under `root` except manifests, sorted by relative
/// path (`/`-separated).
pub fn hash_files(root: &Path) -> std::io::Result<Vec<OutputEntry>> {
    if root.is_file() {
        let name = root.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        return Ok(vec![OutputEntry {
            path: name,
            hash: blob_hash(&std::fs::read(root)?),
        }]);
    }
    let mut out = Vec::new();
    for entry in walkdir::WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(std::io::Error::other)?;
        if !entry.file_type().is_file() || entry.file_name() == MANIFEST_NAME {
            continue;
        }
        let rel = entry.path().strip_prefix(root).expect("walk stays under root");
        let rel: Vec<_> = rel.components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect();
        out.push(OutputEntry {
            path: rel.join("/"),
            hash: blob_hash(&std::fs::read(entry.path())?),
        });
    }
    out.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(out)
}

pub fn entries_hash(entries: &[OutputEntry]) -> String {
    tree_hash(entries.iter().map(|e| (e.path.as_str(), e.hash.as_str())))
}

/// Combined hash of several input paths.
pub fn inputs_hash(paths: &[PathBuf]) -> std::io::Result<String> {
    let per: Vec<String> = paths
        .iter()
        .map(|p| hash_files(p).map(|e| entries_hash(&e)))
        .collect::<std::io::Result<_>>()?;
    let names: Vec<String> = paths.iter().map(|p| p.display().to_string()).collect();
    Ok(tree_hash(names.iter().map(String::as_str).zip(per.iter().map(String::as_str))))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_hash_uses_the_git_header() {
        let mut h = Sha256::new();
        h.update(b"blob 3\0abc");
        assert_eq!(blob_hash(b"abc"), hex::encode(h.finalize()));
    }

    #[test]
    fn directory_hash_ignores_manifests_and_order_of_creation() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(a.path().join("x")).unwrap();
        std::fs::create_dir_all(b.path().join("x")).unwrap();
        std::fs::write(a.path().join("x/1.txt"), "one").unwrap();
        std::fs::write(a.path().join("2.txt"), "two").unwrap();
        std::fs::write(b.path().join("2.txt"), "two").unwrap();
        std::fs::write(b.path().join("x/1.txt"), "one").unwrap();
        std::fs::write(b.path().join(MANIFEST_NAME), "{}").unwrap();
        let ea = hash_files(a.path()).unwrap();
        assert_eq!(ea, hash_files(b.path()).unwrap());
        assert_eq!(ea.iter().map(|e| e.path.as_str()).collect::<Vec<_>>(), ["2.txt", "x/1.txt"]);
        std::fs::write(b.path().join("2.txt"), "TWO").unwrap();
        assert_ne!(entries_hash(&ea), entries_hash(&hash_files(b.path()).unwrap()));
    }
}
