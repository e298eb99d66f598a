//! Architecture-independent checkpoint files (`.cwck`).
//!
//! All integers and floats are little-endian regardless of host:
//!
//! | offset      | size | field                                        |
//! |-------------|------|----------------------------------------------|
//! | 0           | 4    | magic `CWCK`                                 |
//! | 4           | 2    | format version, u16 (currently 1)            |
//! | 6           | 2    | reserved, zero                               |
//! | 8           | 8    | iteration, u64                               |
//! | 16          | 24   | dims, 3 × u64 (slowest axis first)           |
//! | 40          | 8    | alpha, f64                                   |
//! | 48          | 2    | run-id length `n`, u16                       |
//! | 50          | n    | run-id, UTF-8                                |
//! | 50+n        | 8    | value count `c`, u64 (= product of dims)     |
//! | 58+n        | 8c   | field values, f64, row-major                 |
//! | 58+n+8c     | 4    | CRC-32 (IEEE) of the field-value bytes       |

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::solver::{SolverError, SolverState};

pub const MAGIC: &[u8; 4] = b"CWCK";
pub const FORMAT_VERSION: u16 = 1;
pub const EXTENSION: &str = "cwck";
const FIXED_HEADER: usize = 50;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint format version {0}")]
    UnsupportedVersion(u16),
    #[error("checkpoint truncated: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint holds an invalid state: {0}")]
    InvalidState(#[from] SolverError),
}

/// Where a checkpoint was written and when.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub run_id: String,
    pub iteration: u64,
    pub location: PathBuf,
    pub size_bytes: u64,
    pub written_at: f64,
}

pub fn encoded_len(state: &SolverState) -> usize {
    FIXED_HEADER + state.run_id.len() + 8 + 8 * state.field.len() + 4
}

pub fn encode(state: &SolverState) -> Vec<u8> {
    let mut out = Vec::with_capacity(encoded_len(state));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&[0, 0]);
    out.extend_from_slice(&state.iteration.to_le_bytes());
    for d in state.dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out.extend_from_slice(&state.alpha.to_le_bytes());
    let id = state.run_id.as_bytes();
    let id_len = u16::try_from(id.len()).expect("run id longer than 65535 bytes");
    out.extend_from_slice(&id_len.to_le_bytes());
    out.extend_from_slice(id);
    out.extend_from_slice(&(state.field.len() as u64).to_le_bytes());
    let payload_start = out.len();
    for v in &state.field {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&out[payload_start..]);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or(CheckpointError::Truncated {
            needed: self.pos.saturating_add(n),
            have: self.buf.len(),
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<SolverState, CheckpointError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    r.take(2)?;
    let iteration = r.u64()?;
    let mut dims = [0usize; 3];
    for d in dims.iter_mut() {
        *d = usize::try_from(r.u64()?).map_err(|_| CheckpointError::Malformed("dimension too large".into()))?;
    }
    let alpha = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
    let id_len = r.u16()? as usize;
    let run_id = std::str::from_utf8(r.take(id_len)?)
        .map_err(|_| CheckpointError::Malformed("run id is not UTF-8".into()))?
        .to_string();
    let count = r.u64()?;
    let expected = dims.iter().try_fold(1u64, |acc, &d| acc.checked_mul(d as u64));
    if expected != Some(count) {
        return Err(CheckpointError::Malformed(format!("value count {count} does not match dims {dims:?}")));
    }
    let payload_len = usize::try_from(count)
        .ok()
        .and_then(|c| c.checked_mul(8))
        .ok_or_else(|| CheckpointError::Malformed("payload too large".into()))?;
    let payload = r.take(payload_len)?;
    let stored = r.u32()?;
    if r.pos != bytes.len() {
        return Err(CheckpointError::Malformed(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(CheckpointError::ChecksumMismatch { stored, computed });
    }
    let field = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    let mut state = SolverState::new(dims, field, alpha, run_id)?;
    state.iteration = iteration;
    Ok(state)
}

/// Writes atomically: the bytes go to a sibling temp file that is renamed
/// into place, and the temp file is removed if anything fails.
pub fn write_checkpoint(state: &SolverState, destination: &Path, now: f64) -> Result<CheckpointMeta, CheckpointError> {
    let bytes = encode(state);
    write_bytes(&bytes, destination)?;
    Ok(CheckpointMeta {
        run_id: state.run_id.clone(),
        iteration: state.iteration,
        location: destination.to_path_buf(),
        size_bytes: bytes.len() as u64,
        written_at: now,
    })
}

pub(crate) fn write_bytes(bytes: &[u8], destination: &Path) -> Result<(), CheckpointError> {
    if let Some(parent) = destination.parent() {
        fs::create_dir_all(parent)?;
    }
    let tmp = destination.with_extension("partial");
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, destination)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

pub fn read_checkpoint(path: &Path) -> Result<SolverState, CheckpointError> {
    decode(&fs::read(path)?)
}

/// `<run_id>/ckpt-<iteration>.cwck`, relative to a site or store root.
pub fn checkpoint_path(run_id: &str, iteration: u64) -> PathBuf {
    PathBuf::from(run_id).join(format!("ckpt-{iteration}.{EXTENSION}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state() -> SolverState {
        let mut s = SolverState::seeded([8, 8, 8], 0.1, 42, "fig5").unwrap();
        s.advance(3);
        s
    }

    #[test]
    fn layout_sizes() {
        let s = state();
        let bytes = encode(&s);
        assert_eq!(bytes.len(), 58 + 4 + 4096 + 4);
        assert_eq!(&bytes[..4], b"CWCK");
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 3);
        assert_eq!(u16::from_le_bytes(bytes[48..50].try_into().unwrap()), 4);
        assert_eq!(&bytes[50..54], b"fig5");
        assert_eq!(u64::from_le_bytes(bytes[54..62].try_into().unwrap()), 512);
        assert_eq!(encoded_len(&s), bytes.len());
    }

    #[test]
    fn round_trip_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let s = state();
        let path = dir.path().join(checkpoint_path(&s.run_id, s.iteration));
        let meta = write_checkpoint(&s, &path, 12.5).unwrap();
        assert_eq!(meta.size_bytes, 4162);
        assert_eq!(meta.written_at, 12.5);
        assert!(path.ends_with("fig5/ckpt-3.cwck"));
        assert_eq!(read_checkpoint(&path).unwrap(), s);
        assert!(!path.with_extension("partial").exists());
    }

    #[test]
    fn corrupted_payload_fails_checksum() {
        let mut bytes = encode(&state());
        bytes[100] ^= 0x01;
        assert!(matches!(decode(&bytes), Err(CheckpointError::ChecksumMismatch { .. })));
    }

    #[test]
    fn structural_damage_is_reported() {
        let good = encode(&state());
        assert!(matches!(decode(&good[..good.len() - 1]), Err(CheckpointError::Truncated { .. })));
        assert!(matches!(decode(b"NOPE"), Err(CheckpointError::BadMagic)));
        let mut v2 = good.clone();
        v2[4] = 2;
        assert!(matches!(decode(&v2), Err(CheckpointError::UnsupportedVersion(2))));
        let mut extra = good.clone();
        extra.push(0);
        assert!(matches!(decode(&extra), Err(CheckpointError::Malformed(_))));
        let mut dims = good;
        dims[16] = 9;
        assert!(matches!(decode(&dims), Err(CheckpointError::Malformed(_))));
    }

    #[test]
    fn failed_write_leaves_nothing_behind() {
        let dir = tempfile::tempdir().unwrap();
        // Destination is an existing directory, so the rename fails.
        let dest = dir.path().join("taken.cwck");
        fs::create_dir(&dest).unwrap();
        assert!(write_checkpoint(&state(), &dest, 0.0).is_err());
        assert!(!dest.with_extension("partial").exists());
    }
}
