//! Versioned binary checkpoint container.
//!
//! Layout: magic `DFXCKPT\x01`, little-endian u32 header length, JSON header
//! (stage tag, schema version, config hash, creation metadata), little-endian
//! u64 payload length, payload bytes, and a trailing FNV-1a checksum of
//! everything before it. Loading verifies magic, checksum, stage tag and
//! config hash before any payload byte is interpreted. Writes go through a
//! temp file plus rename so no torn checkpoint ever sits under a final name.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::fnv1a64;

const MAGIC: &[u8; 8] = b"DFXCKPT\x01";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub stage: String,
    pub schema_version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub created_by: String,
}

impl CheckpointHeader {
    pub fn new(stage: &str, config_hash: String, seed: u64) -> Self {
        CheckpointHeader {
            stage: stage.to_string(),
            schema_version: crate::config::SCHEMA_VERSION,
            config_hash,
            seed,
            created_by: format!("diffex {}", env!("CARGO_PKG_VERSION")),
        }
    }
}

/// Atomic write: temp file in the same directory, then rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)
            .map_err(|e| Error::io(tmp.display().to_string(), e))?;
        f.write_all(bytes)
            .map_err(|e| Error::io(tmp.display().to_string(), e))?;
        f.sync_all().map_err(|e| Error::io(tmp.display().to_string(), e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn write_checkpoint(path: &Path, header: &CheckpointHeader, payload: &[u8]) -> Result<()> {
    let header_json = serde_json::to_vec(header).expect("header serializes");
    let mut bytes = Vec::with_capacity(payload.len() + header_json.len() + 32);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&header_json);
    bytes.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    bytes.extend_from_slice(payload);
    let checksum = fnv1a64(&bytes);
    bytes.extend_from_slice(&checksum.to_le_bytes());
    atomic_write(path, &bytes)
}

/// Read and fully validate a checkpoint. `expected_hash = None` skips the
/// config-hash comparison (used by standalone tools, never the pipeline).
pub fn read_checkpoint(
    path: &Path,
    expected_stage: &str,
    expected_hash: Option<&str>,
) -> Result<(CheckpointHeader, Vec<u8>)> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let fail = |msg: &str| -> Error {
        Error::Checkpoint(format!("{}: {msg}", path.display()))
    };
    if bytes.len() < MAGIC.len() + 4 + 8 + 8 {
        return Err(fail("file too short"));
    }
    if &bytes[..8] != MAGIC {
        return Err(fail("bad magic; not a diffex checkpoint"));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(trailer.try_into().expect("8-byte trailer"));
    if fnv1a64(body) != stored {
        return Err(fail("checksum mismatch; file is corrupt"));
    }
    let header_len = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes")) as usize;
    if body.len() < 12 + header_len + 8 {
        return Err(fail("truncated header"));
    }
    let header: CheckpointHeader = serde_json::from_slice(&body[12..12 + header_len])
        .map_err(|e| fail(&format!("bad header json: {e}")))?;
    if header.stage != expected_stage {
        return Err(fail(&format!(
            "stage tag `{}` does not match expected `{expected_stage}`",
            header.stage
        )));
    }
    if header.schema_version != crate::config::SCHEMA_VERSION {
        return Err(fail(&format!(
            "schema version {} unsupported",
            header.schema_version
        )));
    }
    if let Some(h) = expected_hash {
        if header.config_hash != h {
            return Err(fail(&format!(
                "config hash {} incompatible with active config {h}; artifacts were built from a different configuration",
                header.config_hash
            )));
        }
    }
    let payload_len =
        u64::from_le_bytes(body[12 + header_len..12 + header_len + 8].try_into().expect("8 bytes"))
            as usize;
    let payload = &body[12 + header_len + 8..];
    if payload.len() != payload_len {
        return Err(fail("payload length mismatch"));
    }
    Ok((header, payload.to_vec()))
}

/// Length-prefixed section writer for checkpoint payloads.
#[derive(Default)]
pub struct PayloadWriter {
    buf: Vec<u8>,
}

impl PayloadWriter {
    pub fn new() -> Self {
        PayloadWriter { buf: Vec::new() }
    }

    pub fn put_json<T: Serialize>(&mut self, value: &T) {
        let json = serde_json::to_vec(value).expect("payload json serializes");
        self.buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
        self.buf.extend_from_slice(&json);
    }

    pub fn put_f64s(&mut self, values: &[f64]) {
        self.buf
            .extend_from_slice(&(values.len() as u64).to_le_bytes());
        for v in values {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub struct PayloadReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> PayloadReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        PayloadReader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("payload truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn get_json<T: for<'de> Deserialize<'de>>(&mut self) -> Result<T> {
        let len = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")) as usize;
        serde_json::from_slice(self.take(len)?)
            .map_err(|e| Error::Checkpoint(format!("bad payload json: {e}")))
    }

    pub fn get_f64s(&mut self) -> Result<Vec<f64>> {
        let len = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")) as usize;
        let bytes = self.take(len * 8)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}
