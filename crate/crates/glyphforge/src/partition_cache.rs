//! Cached `log Z(alpha)` samples. Layout (little endian): magic `GFLZ`,
//! `u32` format version, `u32` point count, `f64` lower grid bound, then one
//! `f64` per grid point.

use std::fs;
use std::path::Path;

use glyphforge_core::adaptive_loss::{PartitionTable, TABLE_ALPHA_MIN, TABLE_POINTS};

use crate::error::{Error, Result};
use crate::store::write_bytes;

pub const DEFAULT_PATH: &str = "cache/log_partition.bin";
const MAGIC: &[u8; 4] = b"GFLZ";
pub const VERSION: u32 = 1;
const HEADER: usize = 4 + 4 + 4 + 8;

pub fn encode(table: &PartitionTable) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER + 8 * table.values().len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(table.values().len() as u32).to_le_bytes());
    out.extend_from_slice(&TABLE_ALPHA_MIN.to_le_bytes());
    for v in table.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// `None` when the bytes are not a current-version table for `points`.
pub fn decode(bytes: &[u8], points: usize) -> Option<PartitionTable> {
    if bytes.len() != HEADER + 8 * points || &bytes[..4] != MAGIC {
        return None;
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    if u32_at(4) != VERSION || u32_at(8) as usize != points || f64_at(12) != TABLE_ALPHA_MIN {
        return None;
    }
    let values = (0..points).map(|i| f64_at(HEADER + 8 * i)).collect();
    PartitionTable::from_samples(PartitionTable::grid(points), values).ok()
}

/// Loads the table from `path`, rebuilding and rewriting it when the file
/// is absent, truncated or from another format version.
pub fn load_or_build(path: &Path) -> Result<PartitionTable> {
    match fs::read(path) {
        Ok(bytes) => {
            if let Some(t) = decode(&bytes, TABLE_POINTS) {
                return Ok(t);
            }
            log::info!("{}: stale partition cache, rebuilding", path.display());
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
        Err(e) => return Err(Error::io(path, e)),
    }
    let table = PartitionTable::build(TABLE_POINTS);
    write_bytes(path, &encode(&table))?;
    Ok(table)
}
