//! Checksummed binary container for parameter files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes
//! header_len   u32
//! header       header_len bytes of UTF-8 JSON
//! blobs        f64 values of every parameter, in header order
//! sha256       32 bytes over everything above
//! ```
//!
//! The header is a JSON object with at least `format_version` and a
//! `params` array of `{name, shape}` entries describing the blobs.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{NumArray, ParamStore};

pub const CHECKSUM_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Writes `header` (which must be an object) plus the params of `store`.
pub fn encode(magic: &[u8; 8], mut header: Value, store: &ParamStore) -> Result<Vec<u8>> {
    let entries: Vec<BlobEntry> = store
        .iter()
        .map(|(name, p)| BlobEntry {
            name: name.clone(),
            shape: p.value.shape().to_vec(),
        })
        .collect();
    header
        .as_object_mut()
        .ok_or_else(|| Error::InvalidConfig("container header must be a JSON object".into()))?
        .insert("params".into(), serde_json::to_value(&entries)?);
    let header = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(12 + header.len() + 8 * store.num_scalars() + CHECKSUM_LEN);
    out.extend_from_slice(magic);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, p) in store.iter() {
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

/// Verifies magic and checksum, then returns the header (without `params`)
/// and the decoded parameters.
pub fn decode(magic: &[u8; 8], bytes: &[u8]) -> Result<(Value, ParamStore)> {
    let corrupt = |m: &str| Error::CorruptFile(m.to_string());
    if bytes.len() < 12 + CHECKSUM_LEN {
        return Err(corrupt("file is truncated"));
    }
    if &bytes[..8] != magic {
        return Err(corrupt("unrecognized file signature"));
    }
    let (body, sum) = bytes.split_at(bytes.len() - CHECKSUM_LEN);
    if Sha256::digest(body).as_slice() != sum {
        return Err(corrupt("checksum mismatch (file truncated or modified)"));
    }
    let header_len = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes")) as usize;
    let header_end = 12usize
        .checked_add(header_len)
        .filter(|&e| e <= body.len())
        .ok_or_else(|| corrupt("header length exceeds file size"))?;
    let mut header: Value = serde_json::from_slice(&body[12..header_end])
        .map_err(|e| Error::CorruptFile(format!("unreadable header: {e}")))?;
    let entries: Vec<BlobEntry> = header
        .as_object_mut()
        .and_then(|o| o.remove("params"))
        .ok_or_else(|| corrupt("header lacks a params index"))
        .and_then(|v| serde_json::from_value(v).map_err(|e| Error::CorruptFile(e.to_string())))?;
    let mut store = ParamStore::new();
    let mut at = header_end;
    for e in entries {
        let count: usize = e.shape.iter().product();
        let end = at + 8 * count;
        if end > body.len() {
            return Err(corrupt("parameter blobs are truncated"));
        }
        let data = body[at..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        store.insert(e.name, NumArray::new(e.shape, data).map_err(|e| Error::CorruptFile(e.to_string()))?);
        at = end;
    }
    if at != body.len() {
        return Err(corrupt("trailing bytes after parameter blobs"));
    }
    Ok((header, store))
}

/// Reads `format_version` from a decoded header and checks it.
pub fn check_version(header: &Value, expected: u32) -> Result<()> {
    let found = header
        .get("format_version")
        .and_then(Value::as_u64)
        .ok_or_else(|| Error::CorruptFile("header lacks format_version".into()))?;
    if found != expected as u64 {
        return Err(Error::VersionMismatch {
            expected,
            found: found.min(u32::MAX as u64) as u32,
        });
    }
    Ok(())
}

/// First 8 bytes of a file, used to tell checkpoint and detector files apart.
pub fn sniff(bytes: &[u8]) -> Option<[u8; 8]> {
    bytes.get(..8).map(|b| b.try_into().expect("8 bytes"))
}
