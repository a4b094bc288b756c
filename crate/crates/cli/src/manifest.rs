//! Provenance record written beside every run's outputs.

use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::Command;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::Config;
use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub seed: u64,
    pub code_version: String,
    pub config: Config,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
    /// Command-specific arguments that affect the outputs.
    pub args: serde_json::Value,
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = std::fs::File::open(path).map_err(|e| CliError::invalid(format!("cannot open {}: {e}", path.display())))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(CliError::internal)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex(&h.finalize()))
}

/// Hashes a file, or every file below a directory in sorted order.
pub fn hash_paths(paths: &[PathBuf]) -> Result<Vec<FileHash>> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut files = Vec::new();
            collect_files(p, &mut files)?;
            files.sort();
            for f in files {
                out.push(FileHash { path: f.display().to_string(), sha256: sha256_file(&f)? });
            }
        } else {
            out.push(FileHash { path: p.display().to_string(), sha256: sha256_file(p)? });
        }
    }
    Ok(out)
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in std::fs::read_dir(dir).map_err(|e| CliError::invalid(format!("cannot list {}: {e}", dir.display())))? {
        let path = entry.map_err(CliError::internal)?.path();
        if path.is_dir() {
            collect_files(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

/// `git describe` of the source tree this binary was built from, or the
/// package version outside a checkout.
pub fn code_version() -> String {
    let dir = env!("CARGO_MANIFEST_DIR");
    Command::new("git")
        .args(["-C", dir, "describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| format!("v{}", env!("CARGO_PKG_VERSION")))
}

impl Manifest {
    pub fn new(command: &str, config: &Config, seed: u64, inputs: &[PathBuf], args: serde_json::Value) -> Result<Self> {
        Ok(Self {
            command: command.to_string(),
            seed,
            code_version: code_version(),
            config: config.clone(),
            inputs: hash_paths(inputs)?,
            outputs: Vec::new(),
            args,
        })
    }

    /// Writes `<command>.manifest.json` into `dir`, which holds the outputs.
    pub fn finish_in(self, outputs: &[PathBuf], dir: &Path) -> Result<()> {
        let path = dir.join(format!("{}.manifest.json", self.command));
        self.finish(outputs, &path)
    }

    /// Records output hashes and writes the manifest as pretty JSON.
    pub fn finish(mut self, outputs: &[PathBuf], path: &Path) -> Result<()> {
        self.outputs = hash_paths(outputs)?;
        let text = serde_json::to_string_pretty(&self).map_err(CliError::internal)?;
        std::fs::write(path, text + "\n").map_err(|e| CliError::internal(format!("writing {}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        assert_eq!(sha256_bytes(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn directories_hash_in_sorted_order() {
        let d = tempfile::tempdir().unwrap();
        std::fs::write(d.path().join("b"), "2").unwrap();
        std::fs::create_dir(d.path().join("a")).unwrap();
        std::fs::write(d.path().join("a/x"), "1").unwrap();
        let h = hash_paths(&[d.path().to_path_buf()]).unwrap();
        assert_eq!(h.len(), 2);
        assert!(h[0].path.ends_with("a/x") && h[1].path.ends_with('b'));
        assert_eq!(h[0].sha256, sha256_bytes(b"1"));
    }
}
