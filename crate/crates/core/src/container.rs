//! Binary container shared by snapshot files and checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! bytes 0..8    ASCII magic, e.g. "SNAPMAT1"
//! bytes 8..12   u32 header length L
//! next L bytes  UTF-8 JSON header (must carry "dtype": "f64")
//! rest          f64 payload, little-endian
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{FormatError, MagicBytes, Result};

pub const SNAPSHOT_MAGIC: &[u8; 8] = b"SNAPMAT1";
pub const POD_MAGIC: &[u8; 8] = b"PODBAS01";
pub const INV_AE_MAGIC: &[u8; 8] = b"INVAE001";
pub const DENSE_AE_MAGIC: &[u8; 8] = b"DAE00001";
pub const ROM_MAGIC: &[u8; 8] = b"ROMBDL01";

/// Serialize a container to bytes.
pub fn encode<H: Serialize>(magic: &[u8; 8], header: &H, payload: &[f64]) -> Result<Vec<u8>> {
    let text = serde_json::to_string(header)
        .map_err(|e| FormatError::Header(e.to_string()))?;
    let mut out = Vec::with_capacity(12 + text.len() + payload.len() * 8);
    out.extend_from_slice(magic);
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn write<H: Serialize>(path: &Path, magic: &[u8; 8], header: &H, payload: &[f64]) -> Result<()> {
    let bytes = encode(magic, header, payload)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    Ok(())
}

/// A container whose magic and header have been checked but whose payload
/// length is not yet validated against the header.
#[derive(Debug)]
pub struct RawContainer {
    pub magic: [u8; 8],
    pub header_text: String,
    payload: Vec<u8>,
}

impl RawContainer {
    pub fn header<H: DeserializeOwned>(&self) -> Result<H> {
        Ok(serde_json::from_str(&self.header_text)
            .map_err(|e| FormatError::Header(e.to_string()))?)
    }

    /// Decode exactly `expected` f64 values.
    pub fn payload(&self, expected: usize) -> Result<Vec<f64>> {
        let want = expected * 8;
        if self.payload.len() != want {
            return Err(FormatError::Truncated {
                expected: want,
                found: self.payload.len(),
            }
            .into());
        }
        Ok(self
            .payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect())
    }

    pub fn payload_bytes(&self) -> &[u8] {
        &self.payload
    }
}

/// Peek at the magic of a container without validating anything else.
pub fn sniff_magic(bytes: &[u8]) -> Option<[u8; 8]> {
    bytes.get(..8).map(|m| m.try_into().expect("8 bytes"))
}

/// Parse the framing. `expected` lists the acceptable magics.
pub fn decode(bytes: &[u8], expected: &[&'static [u8; 8]]) -> Result<RawContainer> {
    let expected_name = std::str::from_utf8(expected[0]).unwrap_or("?");
    let Some(magic) = sniff_magic(bytes) else {
        return Err(FormatError::BadMagic {
            expected: expected_name,
            found: MagicBytes(bytes.to_vec()),
        }
        .into());
    };
    if !expected.iter().any(|m| **m == magic) {
        return Err(FormatError::BadMagic {
            expected: expected_name,
            found: MagicBytes(magic.to_vec()),
        }
        .into());
    }
    if bytes.len() < 12 {
        return Err(FormatError::Truncated {
            expected: 12,
            found: bytes.len(),
        }
        .into());
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    if bytes.len() < 12 + len {
        return Err(FormatError::Truncated {
            expected: 12 + len,
            found: bytes.len(),
        }
        .into());
    }
    let header_text = std::str::from_utf8(&bytes[12..12 + len])
        .map_err(|e| FormatError::Header(format!("header is not UTF-8: {e}")))?
        .to_string();

    #[derive(serde::Deserialize)]
    struct DType {
        dtype: Option<String>,
    }
    let dt: DType = serde_json::from_str(&header_text)
        .map_err(|e| FormatError::Header(e.to_string()))?;
    match dt.dtype.as_deref() {
        Some("f64") => {}
        Some(other) => return Err(FormatError::DType(other.to_string()).into()),
        None => return Err(FormatError::Header("missing dtype".into()).into()),
    }
    Ok(RawContainer {
        magic,
        header_text,
        payload: bytes[12 + len..].to_vec(),
    })
}

pub fn read(path: &Path, expected: &[&'static [u8; 8]]) -> Result<RawContainer> {
    let bytes = fs::read(path)?;
    decode(&bytes, expected)
}
