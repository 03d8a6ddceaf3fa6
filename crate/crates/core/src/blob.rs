//! Versioned, checksummed container for a JSON header plus `f32` payload.
//!
//! Layout: 8-byte magic, `u32` version, `u64` header length, header JSON,
//! `u64` payload length (in floats), little-endian `f32` payload, then the
//! SHA-256 of every preceding byte.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, thiserror::Error)]
pub enum BlobError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt file: {0}")]
    Corrupt(String),
    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
}

pub fn encode<H: Serialize>(magic: &[u8; 8], version: u32, header: &H, payload: &[f32]) -> Vec<u8> {
    let json = serde_json::to_vec(header).expect("header serializes");
    let mut out = Vec::with_capacity(8 + 4 + 8 + json.len() + 8 + payload.len() * 4 + 32);
    out.extend_from_slice(magic);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

pub fn decode<H: DeserializeOwned>(magic: &[u8; 8], version: u32, bytes: &[u8]) -> Result<(H, Vec<f32>), BlobError> {
    let corrupt = |m: &str| BlobError::Corrupt(m.to_string());
    if bytes.len() < 8 + 4 + 8 + 8 + 32 {
        return Err(corrupt("file too short"));
    }
    if &bytes[..8] != magic {
        return Err(corrupt("bad magic"));
    }
    let found = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if found != version {
        return Err(BlobError::Version {
            found,
            expected: version,
        });
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupt("checksum mismatch (truncated or modified)"));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let rest = &body[20..];
    if rest.len() < hlen + 8 {
        return Err(corrupt("truncated header"));
    }
    let header: H = serde_json::from_slice(&rest[..hlen]).map_err(|e| corrupt(&e.to_string()))?;
    let plen = u64::from_le_bytes(rest[hlen..hlen + 8].try_into().unwrap()) as usize;
    let data = &rest[hlen + 8..];
    if data.len() != plen * 4 {
        return Err(corrupt("payload length mismatch"));
    }
    let payload = data
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((header, payload))
}

pub fn write<H: Serialize>(path: &Path, magic: &[u8; 8], version: u32, header: &H, payload: &[f32]) -> Result<(), BlobError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(path, encode(magic, version, header, payload))?;
    Ok(())
}

pub fn read<H: DeserializeOwned>(path: &Path, magic: &[u8; 8], version: u32) -> Result<(H, Vec<f32>), BlobError> {
    decode(magic, version, &fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    const M: &[u8; 8] = b"TESTBLOB";

    #[test]
    fn round_trip_and_corruption() {
        let bytes = encode(M, 3, &vec!["a", "b"], &[1.0, -2.5, f32::MIN_POSITIVE]);
        let (h, p): (Vec<String>, Vec<f32>) = decode(M, 3, &bytes).unwrap();
        assert_eq!(h, vec!["a", "b"]);
        assert_eq!(p, vec![1.0, -2.5, f32::MIN_POSITIVE]);
        assert!(matches!(decode::<Vec<String>>(M, 4, &bytes), Err(BlobError::Version { found: 3, expected: 4 })));
        assert!(matches!(decode::<Vec<String>>(M, 3, &bytes[..bytes.len() - 5]), Err(BlobError::Corrupt(_))));
        let mut flipped = bytes.clone();
        flipped[30] ^= 1;
        assert!(matches!(decode::<Vec<String>>(M, 3, &flipped), Err(BlobError::Corrupt(_))));
    }
}
