//! Single-file parameter archives.
//!
//! Layout: the magic bytes `NLFTCKPT`, a little-endian `u64` header length,
//! a JSON header, then every array as little-endian `f64` in header order.
//! Values round-trip bit-exactly.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;

const MAGIC: &[u8; 8] = b"NLFTCKPT";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    kind: String,
    version: String,
    config: serde_json::Value,
    arrays: Vec<(String, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Archive {
    pub kind: String,
    pub version: String,
    pub config: serde_json::Value,
    pub arrays: Vec<(String, Vec<f64>)>,
}

impl Archive {
    pub fn new(kind: &str, config: serde_json::Value) -> Self {
        Self {
            kind: kind.to_string(),
            version: VERSION.to_string(),
            config,
            arrays: Vec::new(),
        }
    }

    pub fn push(&mut self, name: &str, data: Vec<f64>) {
        self.arrays.push((name.to_string(), data));
    }

    pub fn take(&mut self, name: &str) -> Result<Vec<f64>> {
        let pos = self
            .arrays
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::Compatibility(format!("archive has no array '{name}'")))?;
        Ok(self.arrays.remove(pos).1)
    }

    pub fn has(&self, name: &str) -> bool {
        self.arrays.iter().any(|(n, _)| n == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            kind: self.kind.clone(),
            version: self.version.clone(),
            config: self.config.clone(),
            arrays: self.arrays.iter().map(|(n, d)| (n.clone(), d.len())).collect(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let body: usize = self.arrays.iter().map(|(_, d)| d.len() * 8).sum();
        let mut out = Vec::with_capacity(16 + header.len() + body);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, data) in &self.arrays {
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Data(format!("malformed checkpoint: {msg}"));
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let hend = 16usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
        let header: Header =
            serde_json::from_slice(&bytes[16..hend]).map_err(|e| bad(&e.to_string()))?;
        let mut pos = hend;
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for (name, len) in header.arrays {
            let end = len
                .checked_mul(8)
                .and_then(|n| pos.checked_add(n))
                .filter(|&e| e <= bytes.len())
                .ok_or_else(|| bad("truncated array data"))?;
            let data = bytes[pos..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            arrays.push((name, data));
            pos = end;
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self {
            kind: header.kind,
            version: header.version,
            config: header.config,
            arrays,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(Error::Compatibility(format!(
                "expected a '{kind}' checkpoint, found '{}'",
                self.kind
            )))
        }
    }
}

/// Hex SHA-256 of the exact bit patterns of `params`.
pub fn digest(params: &[f64]) -> String {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    for v in params {
        hasher.update(v.to_le_bytes());
    }
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bit_exact() {
        let mut a = Archive::new("thing", serde_json::json!({"k": 5}));
        a.push("w", vec![0.1, -0.0, f64::MIN_POSITIVE, 1e300]);
        a.push("empty", vec![]);
        let back = Archive::from_bytes(&a.to_bytes()).unwrap();
        assert_eq!(back.arrays.len(), 2);
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.arrays[0].1), bits(&a.arrays[0].1));
        assert_eq!(back.config["k"], 5);
        assert!(back.expect_kind("other").is_err());
    }

    #[test]
    fn rejects_garbage() {
        assert!(Archive::from_bytes(b"nope").is_err());
        let mut bytes = Archive::new("x", serde_json::Value::Null).to_bytes();
        bytes.push(1);
        assert!(Archive::from_bytes(&bytes).is_err());
        let mut a = Archive::new("x", serde_json::Value::Null);
        a.push("w", vec![1.0, 2.0]);
        let bytes = a.to_bytes();
        assert!(Archive::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn digest_sees_every_bit() {
        assert_ne!(digest(&[0.0]), digest(&[-0.0]));
        assert_eq!(digest(&[1.0, 2.0]), digest(&[1.0, 2.0]));
        assert_eq!(digest(&[]).len(), 64);
    }
}
