//! Run manifests and content hashing shared by every written artifact.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Provenance header written first into every output directory and as the
/// `#` line of every CSV artifact. Holds no timestamps, host details or
/// output location, so reruns stay byte-identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config_path: Option<String>,
    pub seed: u64,
    /// SHA-256 of each input file, in argument order.
    pub input_hashes: Vec<(String, String)>,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64) -> Self {
        Self {
            tool: "commutation".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config_path: None,
            seed,
            input_hashes: Vec::new(),
        }
    }

    pub fn with_input(mut self, name: &str, content: &[u8]) -> Self {
        self.input_hashes.push((name.into(), sha256_hex(content)));
        self
    }

    pub fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("serializable")
    }

    /// Content hash over the manifest itself.
    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("serializable").as_bytes())
    }
}
