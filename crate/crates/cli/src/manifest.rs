use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Written next to every run's outputs. Holds no timestamps, so reruns with
/// the same config and seed produce the same bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config_hash: String,
    pub config: serde_json::Value,
    pub outputs: Vec<String>,
}

/// SHA-256 of the compact JSON form, hex encoded.
pub fn config_hash(config: &serde_json::Value) -> String {
    let bytes = serde_json::to_vec(config).expect("JSON values serialize");
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}
