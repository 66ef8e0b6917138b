//! Run manifests and deterministic JSON reports.
//!
//! Every CLI invocation embeds a manifest (command, input digests,
//! truncation and precision settings, tool version). Payloads use ordered
//! maps throughout, so two runs with equal manifests serialize to
//! identical bytes once the wall-clock field is ignored.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub tool_version: String,
    pub command: String,
    /// Input name -> FNV-1a 64 digest of the raw bytes.
    pub inputs: BTreeMap<String, String>,
    pub params: BTreeMap<String, String>,
    pub precision_bits: u64,
}

impl RunManifest {
    pub fn new(command: &str, precision_bits: u64) -> Self {
        RunManifest {
            schema_version: SCHEMA_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            inputs: BTreeMap::new(),
            params: BTreeMap::new(),
            precision_bits,
        }
    }

    pub fn input(&mut self, name: &str, bytes: &[u8]) -> &mut Self {
        self.inputs.insert(name.to_string(), fnv1a64_hex(bytes));
        self
    }

    pub fn param(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.params.insert(key.to_string(), value.to_string());
        self
    }
}

/// A report envelope: manifest + payload + timing. The timing field sits
/// outside the determinism contract.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Report<T> {
    pub manifest: RunManifest,
    pub wall_ms: u64,
    pub payload: T,
}

impl<T: Serialize> Report<T> {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization")
    }
}

/// FNV-1a 64-bit digest, hex-encoded.
pub fn fnv1a64_hex(bytes: &[u8]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_is_stable() {
        assert_eq!(fnv1a64_hex(b""), "cbf29ce484222325");
        assert_eq!(fnv1a64_hex(b"a"), fnv1a64_hex(b"a"));
        assert_ne!(fnv1a64_hex(b"a"), fnv1a64_hex(b"b"));
    }

    #[test]
    fn equal_manifests_serialize_identically() {
        let build = || {
            let mut m = RunManifest::new("weights check", 256);
            m.input("seq", b"{\"kind\":\"gevrey\",\"s\":2}");
            m.param("kmax", 128);
            Report {
                manifest: m,
                wall_ms: 0,
                payload: vec![1.0f64, 0.5],
            }
        };
        assert_eq!(build().to_json(), build().to_json());
    }
}
