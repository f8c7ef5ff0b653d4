//! Run manifests: one `key=value` text file per command invocation.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Ordered record of a run: command, configuration, input hashes, seeds,
/// timestamps and produced artifacts.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RunManifest {
    entries: Vec<(String, String)>,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        let mut m = Self::default();
        m.set("command", command);
        m.set("library_version", env!("CARGO_PKG_VERSION"));
        m.set("started_unix", unix_now().to_string());
        m
    }

    /// Insert or replace `key`.
    pub fn set(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string().replace('\n', " ");
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(entry) => entry.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Record `input.<name>` and its content hash.
    pub fn input_file(&mut self, name: &str, path: &Path) -> Result<()> {
        self.set(&format!("input.{name}"), path.display());
        self.set(&format!("input.{name}.sha256"), file_sha256(path)?);
        Ok(())
    }

    pub fn artifact(&mut self, name: &str, path: &Path) {
        self.set(&format!("artifact.{name}"), path.display());
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut m = Self::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::data(format!("bad manifest line {line:?}")))?;
            m.set(k, v);
        }
        Ok(m)
    }

    /// Stamps `finished_unix` and writes the file.
    pub fn write(&mut self, path: &Path) -> Result<()> {
        self.set("finished_unix", unix_now());
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn set_replaces_and_parse_round_trips() {
        let mut m = RunManifest::new("prep");
        m.set("seed", 7);
        m.set("seed", 8);
        assert_eq!(m.get("seed"), Some("8"));
        let back = RunManifest::parse(&m.to_text()).unwrap();
        assert_eq!(back, m);
        assert!(RunManifest::parse("novalue\n").is_err());
    }

    #[test]
    fn hashes_are_stable() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
