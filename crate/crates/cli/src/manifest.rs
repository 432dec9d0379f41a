//! Run manifests: `key=value` text recording what a command read and wrote.
//!
//! Manifests carry no timestamps, so rerunning a command with the same
//! config and inputs reproduces its manifest byte for byte.

use std::path::Path;

use anyhow::{Context, Result};
use sha2::{Digest, Sha256};

pub struct Manifest {
    lines: Vec<(String, String)>,
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl Manifest {
    pub fn new(command: &str) -> Self {
        Manifest {
            lines: vec![
                ("command".into(), command.into()),
                ("version".into(), env!("CARGO_PKG_VERSION").into()),
            ],
        }
    }

    pub fn set(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.lines.push((key.to_string(), value.to_string()));
        self
    }

    pub fn input(&mut self, name: &str, path: &Path) -> Result<&mut Self> {
        let hash = file_sha256(path)?;
        self.set(&format!("input.{name}"), path.display());
        Ok(self.set(&format!("input.{name}.sha256"), hash))
    }

    pub fn output(&mut self, name: &str, path: &Path) -> Result<&mut Self> {
        let hash = file_sha256(path)?;
        self.set(&format!("output.{name}"), path.display());
        Ok(self.set(&format!("output.{name}.sha256"), hash))
    }

    pub fn render(&self) -> String {
        self.lines.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.render()).with_context(|| format!("writing manifest {}", path.display()))?;
        log::info!("manifest written to {}", path.display());
        Ok(())
    }
}
