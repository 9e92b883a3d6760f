//! Content fingerprints for pipeline artifacts.
//!
//! Every artifact records the fingerprint of the corpus spec that produced
//! its inputs; commands refuse to mix artifacts from different corpora.

use crate::error::{Error, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Fingerprint of any serializable config: sha256 over its canonical JSON.
pub fn fingerprint<T: Serialize>(value: &T) -> Result<String> {
    let json = serde_json::to_string(value).map_err(|e| Error::Input(e.to_string()))?;
    Ok(sha256_hex(json.as_bytes()))
}
