//! `HDT1` checkpoint files.
//!
//! Layout (little-endian): magic `HDT1`, `u32` format version, `u64` payload
//! length, the bincode-encoded [`Checkpoint`], then the SHA-256 of the payload.

use std::path::Path;

use hdtree_core::trainer::Checkpoint;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io::write_file;

pub const MAGIC: &[u8; 4] = b"HDT1";
pub const VERSION: u32 = 1;
const HEADER: usize = 16;
const DIGEST: usize = 32;

pub fn encode(checkpoint: &Checkpoint) -> Vec<u8> {
    let payload = bincode::serialize(checkpoint).expect("checkpoint types serialize infallibly");
    let mut out = Vec::with_capacity(HEADER + payload.len() + DIGEST);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
    out.extend_from_slice(&Sha256::digest(&payload));
    out
}

/// Parses and validates a checkpoint image; `path` only labels errors.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let bad = |msg: String| Error::format(path, msg);
    if bytes.len() < HEADER + DIGEST || &bytes[..4] != MAGIC {
        return Err(bad("not an HDT1 checkpoint".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad(format!("checkpoint format version {version}, this build reads {VERSION}")));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    if bytes.len() != HEADER + len + DIGEST {
        return Err(bad(format!("payload of {len} bytes does not match file size {}", bytes.len())));
    }
    let payload = &bytes[HEADER..HEADER + len];
    if Sha256::digest(payload).as_slice() != &bytes[HEADER + len..] {
        return Err(bad("checksum mismatch".into()));
    }
    let checkpoint: Checkpoint = bincode::deserialize(payload).map_err(|e| bad(format!("corrupt payload: {e}")))?;
    checkpoint.model.validate().map_err(|e| bad(format!("inconsistent model: {e}")))?;
    Ok(checkpoint)
}

pub fn save(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    write_file(path, &encode(checkpoint))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Hex SHA-256 of arbitrary bytes.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
