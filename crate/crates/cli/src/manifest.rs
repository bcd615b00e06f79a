//! Provenance record attached to every artifact.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Benchmark,
    Fit,
    Plan,
    Simulate,
    KernelCheck,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: Command,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub seed: Option<u64>,
    /// Hex SHA-256 over the input contents and the resolved parameters.
    pub config_digest: String,
}

/// Accumulates what a command consumed so the digest reflects the
/// effective configuration rather than file names.
#[derive(Debug)]
pub struct ManifestBuilder {
    command: Command,
    inputs: Vec<String>,
    hasher: Sha256,
}

impl ManifestBuilder {
    pub fn new(command: Command) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(serde_json::to_vec(&command).expect("command serializes"));
        Self {
            command,
            inputs: Vec::new(),
            hasher,
        }
    }

    /// Records an input by name and content. Built-in defaults use a
    /// `builtin:` name.
    pub fn input(&mut self, name: impl Into<String>, content: &[u8]) -> &mut Self {
        let name = name.into();
        self.hasher.update((content.len() as u64).to_le_bytes());
        self.hasher.update(content);
        self.inputs.push(name);
        self
    }

    pub fn param<T: Serialize>(&mut self, key: &str, value: &T) -> &mut Self {
        let v = serde_json::to_vec(value).expect("parameter serializes");
        self.hasher.update((key.len() as u64).to_le_bytes());
        self.hasher.update(key.as_bytes());
        self.hasher.update((v.len() as u64).to_le_bytes());
        self.hasher.update(v);
        self
    }

    pub fn finish(&self, outputs: Vec<String>, seed: Option<u64>) -> RunManifest {
        RunManifest {
            command: self.command,
            inputs: self.inputs.clone(),
            outputs,
            seed,
            config_digest: hex::encode(self.hasher.clone().finalize()),
        }
    }
}
