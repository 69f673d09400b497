//! Canonical artifact framing.
//!
//! Binary artifacts are laid out as
//!
//! ```text
//! magic[4] | format_version: u32 LE | payload_len: u64 LE | payload | checksum: u64 LE
//! ```
//!
//! where the checksum is the first eight bytes (big-endian) of the SHA-256
//! digest over everything preceding it. JSON-lines artifacts carry the same
//! information in a leading header line, and single JSON documents in an
//! envelope object around the payload.

use std::io::{BufRead, Write};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

pub const INDEX_MAGIC: [u8; 4] = *b"EVIX";
pub const MODEL_MAGIC: [u8; 4] = *b"EVMD";
pub const EMBEDDING_MAGIC: [u8; 4] = *b"EVEM";
pub const L2R_MAGIC: [u8; 4] = *b"EVLR";
pub const BIENCODER_MAGIC: [u8; 4] = *b"EVBE";
pub const QUERY_MAGIC: [u8; 4] = *b"EVQY";
pub const RANKING_MAGIC: [u8; 4] = *b"EVRL";
pub const RERANK_MAGIC: [u8; 4] = *b"EVRR";
pub const PREDICTION_MAGIC: [u8; 4] = *b"EVPR";
pub const SPLIT_MAGIC: [u8; 4] = *b"EVSP";
pub const REPORT_MAGIC: [u8; 4] = *b"EVRP";
pub const HISTORY_MAGIC: [u8; 4] = *b"EVHS";
pub const GRID_MAGIC: [u8; 4] = *b"EVGR";
pub const SCORER_MAGIC: [u8; 4] = *b"EVSC";
pub const MANIFEST_MAGIC: [u8; 4] = *b"EVMF";
pub const CACHE_KEY_MAGIC: [u8; 4] = *b"EVCK";

const HEADER_LEN: usize = 4 + 4 + 8;
const TRAILER_LEN: usize = 8;

pub fn checksum64(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    let mut head = [0u8; 8];
    head.copy_from_slice(&digest[..8]);
    u64::from_be_bytes(head)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn frame(magic: [u8; 4], version: u32, payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len() + TRAILER_LEN);
    out.extend_from_slice(&magic);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
    let sum = checksum64(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

/// Validates magic, checksum and version (in that order) and returns the payload.
pub fn unframe(magic: [u8; 4], expected_version: u32, bytes: &[u8]) -> Result<&[u8]> {
    if bytes.len() < HEADER_LEN + TRAILER_LEN {
        return Err(Error::Corrupt(format!("artifact truncated to {} bytes", bytes.len())));
    }
    if bytes[..4] != magic {
        return Err(Error::BadMagic {
            expected: String::from_utf8_lossy(&magic).into_owned(),
            found: String::from_utf8_lossy(&bytes[..4]).into_owned(),
        });
    }
    let body_end = bytes.len() - TRAILER_LEN;
    let stored = u64::from_le_bytes(bytes[body_end..].try_into().expect("8-byte trailer"));
    let computed = checksum64(&bytes[..body_end]);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let found = u32::from_le_bytes(bytes[4..8].try_into().expect("4-byte version"));
    if found != expected_version {
        return Err(Error::VersionMismatch { expected: expected_version, found });
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8-byte length")) as usize;
    if HEADER_LEN + len != body_end {
        return Err(Error::Corrupt(format!(
            "payload length {len} disagrees with file size {}",
            bytes.len()
        )));
    }
    Ok(&bytes[HEADER_LEN..body_end])
}

#[derive(Default)]
pub struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn i64(&mut self, v: i64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }

    pub fn f64s(&mut self, values: &[f64]) {
        self.u64(values.len() as u64);
        for &v in values {
            self.f64(v);
        }
    }

    pub fn into_inner(self) -> Vec<u8> {
        self.buf
    }
}

pub struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Corrupt(format!("unexpected end of payload at byte {}", self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn i64(&mut self) -> Result<i64> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn str(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|e| Error::Corrupt(format!("invalid utf-8: {e}")))
    }

    pub fn f64s(&mut self) -> Result<Vec<f64>> {
        let len = self.len_prefix(8)?;
        (0..len).map(|_| self.f64()).collect()
    }

    /// Reads a u64 count and sanity-checks it against the remaining bytes.
    pub fn len_prefix(&mut self, min_item_bytes: usize) -> Result<usize> {
        let len = self.u64()? as usize;
        if len.saturating_mul(min_item_bytes) > self.remaining() {
            return Err(Error::Corrupt(format!("count {len} exceeds remaining payload")));
        }
        Ok(len)
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn finish(self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(Error::Corrupt(format!("{} trailing bytes in payload", self.remaining())));
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
struct JsonlHeader {
    magic: String,
    format_version: u32,
    records: usize,
    checksum: String,
}

/// Writes records as JSON lines preceded by a header line carrying the magic,
/// version, record count and checksum over the record lines.
pub fn write_jsonl_artifact<T: Serialize, W: Write>(
    mut out: W,
    magic: [u8; 4],
    records: &[T],
) -> Result<()> {
    let mut body = Vec::new();
    for rec in records {
        serde_json::to_writer(&mut body, rec)?;
        body.push(b'\n');
    }
    let header = JsonlHeader {
        magic: String::from_utf8_lossy(&magic).into_owned(),
        format_version: FORMAT_VERSION,
        records: records.len(),
        checksum: format!("{:016x}", checksum64(&body)),
    };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    out.write_all(&body)?;
    out.flush()?;
    Ok(())
}

pub fn read_jsonl_artifact<T: DeserializeOwned, R: BufRead>(input: R, magic: [u8; 4]) -> Result<Vec<T>> {
    let mut lines = input.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| Error::Corrupt("missing artifact header line".into()))??;
    let header: JsonlHeader = serde_json::from_str(&header_line)
        .map_err(|e| Error::Corrupt(format!("bad artifact header: {e}")))?;
    let expected_magic = String::from_utf8_lossy(&magic).into_owned();
    if header.magic != expected_magic {
        return Err(Error::BadMagic { expected: expected_magic, found: header.magic });
    }
    let mut body = Vec::new();
    let mut raw = Vec::new();
    for line in lines {
        let line = line?;
        body.extend_from_slice(line.as_bytes());
        body.push(b'\n');
        raw.push(line);
    }
    let computed = checksum64(&body);
    let stored = u64::from_str_radix(&header.checksum, 16)
        .map_err(|_| Error::Corrupt(format!("bad checksum field `{}`", header.checksum)))?;
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    if header.format_version != FORMAT_VERSION {
        return Err(Error::VersionMismatch { expected: FORMAT_VERSION, found: header.format_version });
    }
    if raw.len() != header.records {
        return Err(Error::Corrupt(format!(
            "header announces {} records, found {}",
            header.records,
            raw.len()
        )));
    }
    raw.iter()
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Corrupt(format!("record {}: {e}", i + 1)))
        })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct JsonEnvelope {
    magic: String,
    format_version: u32,
    checksum: String,
    payload: serde_json::Value,
}

/// Checksum over the compact, key-sorted form of the payload so it survives
/// pretty-printing and reparsing.
fn payload_checksum(payload: &serde_json::Value) -> Result<u64> {
    Ok(checksum64(&serde_json::to_vec(payload)?))
}

/// Pretty-printed JSON document wrapped in a magic/version/checksum envelope.
pub fn encode_json_artifact<T: Serialize>(magic: [u8; 4], value: &T) -> Result<Vec<u8>> {
    let payload = serde_json::to_value(value)?;
    let env = JsonEnvelope {
        magic: String::from_utf8_lossy(&magic).into_owned(),
        format_version: FORMAT_VERSION,
        checksum: format!("{:016x}", payload_checksum(&payload)?),
        payload,
    };
    let mut out = serde_json::to_vec_pretty(&env)?;
    out.push(b'\n');
    Ok(out)
}

pub fn decode_json_artifact<T: DeserializeOwned>(magic: [u8; 4], bytes: &[u8]) -> Result<T> {
    let env: JsonEnvelope =
        serde_json::from_slice(bytes).map_err(|e| Error::Corrupt(format!("bad artifact envelope: {e}")))?;
    let expected = String::from_utf8_lossy(&magic).into_owned();
    if env.magic != expected {
        return Err(Error::BadMagic { expected, found: env.magic });
    }
    let stored = u64::from_str_radix(&env.checksum, 16)
        .map_err(|_| Error::Corrupt(format!("bad checksum field `{}`", env.checksum)))?;
    let computed = payload_checksum(&env.payload)?;
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    if env.format_version != FORMAT_VERSION {
        return Err(Error::VersionMismatch { expected: FORMAT_VERSION, found: env.format_version });
    }
    Ok(serde_json::from_value(env.payload)?)
}
