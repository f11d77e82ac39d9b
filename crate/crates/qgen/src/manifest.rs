//! Run manifests: what a command read, what it wrote, and how long it took.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Git-style object hash (`blob <len>\0` + content) over SHA-256.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputFile {
    pub path: PathBuf,
    pub hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub started_unix_secs: u64,
    pub elapsed_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: BTreeMap<String, String>,
    pub seed: Option<u64>,
    pub inputs: Vec<InputFile>,
    pub outputs: Vec<PathBuf>,
    pub timings: Timings,
}

/// Collects a manifest while a command runs.
pub struct ManifestBuilder {
    manifest: RunManifest,
    clock: Instant,
}

impl ManifestBuilder {
    pub fn new(command: &str) -> Self {
        let started = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        Self {
            manifest: RunManifest {
                command: command.to_string(),
                config: BTreeMap::new(),
                seed: None,
                inputs: Vec::new(),
                outputs: Vec::new(),
                timings: Timings { started_unix_secs: started, elapsed_secs: 0.0 },
            },
            clock: Instant::now(),
        }
    }

    pub fn config<K: Into<String>, V: Into<String>>(&mut self, entries: impl IntoIterator<Item = (K, V)>) {
        self.manifest.config.extend(entries.into_iter().map(|(k, v)| (k.into(), v.into())));
    }

    pub fn seed(&mut self, seed: u64) {
        self.manifest.seed = Some(seed);
    }

    /// Hashes and records an input file; repeated paths are recorded once.
    pub fn input(&mut self, path: &Path) -> Result<()> {
        if self.manifest.inputs.iter().any(|i| i.path == path) {
            return Ok(());
        }
        let bytes = fs::read(path).with_context(|| format!("{}: cannot read", path.display()))?;
        self.manifest.inputs.push(InputFile { path: path.to_path_buf(), hash: content_hash(&bytes) });
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<()> {
        if self.manifest.outputs.iter().any(|p| p == path) {
            bail!("{}: output recorded twice", path.display());
        }
        self.manifest.outputs.push(path.to_path_buf());
        Ok(())
    }

    /// Writes the manifest to `path` and returns it.
    pub fn finish(mut self, path: &Path) -> Result<RunManifest> {
        self.manifest.timings.elapsed_secs = self.clock.elapsed().as_secs_f64();
        let text = serde_json::to_string_pretty(&self.manifest)?;
        fs::write(path, text + "\n").with_context(|| format!("{}: cannot write", path.display()))?;
        Ok(self.manifest)
    }
}

pub fn read_manifest(path: &Path) -> Result<RunManifest> {
    let text = fs::read_to_string(path).with_context(|| format!("{}: cannot read", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("{}: invalid manifest", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_matches_git_object_format() {
        // `printf 'hello\n' | git hash-object --object-format=sha256 --stdin`
        assert_eq!(content_hash(b"hello\n"), "2cf8d83d9ee29543b34a87727421fdecb7e3f3a183d337639025de576db9ebb4");
    }

    #[test]
    fn outputs_are_unique() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("in.txt");
        fs::write(&input, "x").unwrap();
        let mut b = ManifestBuilder::new("test");
        b.input(&input).unwrap();
        b.input(&input).unwrap();
        b.output(Path::new("a")).unwrap();
        assert!(b.output(Path::new("a")).is_err());
        let m = b.finish(&dir.path().join("m.json")).unwrap();
        assert_eq!(m.inputs.len(), 1);
        assert_eq!(read_manifest(&dir.path().join("m.json")).unwrap(), m);
    }
}
