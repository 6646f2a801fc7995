//! Snapshot file format.
//!
//! All integers little-endian.
//!
//! ```text
//! header:  magic "DESNAP01" | config_digest u64 | stored_dim u32 | record_count u64
//! record:  key_len u32 | key bytes | frequency u64 | last_update_step u64 | slot_count u16
//!          | slot_count × { name_len u16 | name bytes | stored_dim × f32 }
//!          | stored_dim × f32 (the vector)
//! ```
//!
//! Slots are written in ascending name order.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::codec::{Decoder, Encoder};
use crate::entry::EmbeddingEntry;
use crate::error::{Error, Result};
use crate::key::EmbeddingKey;

pub const SNAPSHOT_MAGIC: &[u8; 8] = b"DESNAP01";
pub const HEADER_LEN: usize = 8 + 8 + 4 + 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SnapshotHeader {
    pub config_digest: u64,
    pub stored_dim: u32,
    pub record_count: u64,
}

impl SnapshotHeader {
    pub fn encode(&self, e: &mut Encoder) {
        e.raw(SNAPSHOT_MAGIC)
            .u64(self.config_digest)
            .u32(self.stored_dim)
            .u64(self.record_count);
    }

    pub fn decode(d: &mut Decoder<'_>) -> Result<Self> {
        let magic = d.raw(8)?;
        if magic != SNAPSHOT_MAGIC {
            return Err(Error::FormatError("bad snapshot magic".into()));
        }
        Ok(Self {
            config_digest: d.u64()?,
            stored_dim: d.u32()?,
            record_count: d.u64()?,
        })
    }
}

/// One `(key, entry)` pair as stored in a snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct StoreSnapshotRecord {
    pub key: EmbeddingKey,
    pub entry: EmbeddingEntry,
}

pub fn encode_record(e: &mut Encoder, key: &EmbeddingKey, entry: &EmbeddingEntry) {
    e.bytes32(key.as_bytes())
        .u64(entry.frequency)
        .u64(entry.last_update_step)
        .u16(entry.slots.len() as u16);
    for (name, slot) in &entry.slots {
        e.bytes16(name.as_bytes()).f32s(slot);
    }
    e.f32s(&entry.vector);
}

pub fn decode_record(d: &mut Decoder<'_>, stored_dim: usize) -> Result<StoreSnapshotRecord> {
    let key = EmbeddingKey::new(d.bytes32()?.to_vec()).map_err(|e| Error::FormatError(e.to_string()))?;
    let frequency = d.u64()?;
    let last_update_step = d.u64()?;
    let slot_count = d.u16()?;
    let mut slots = BTreeMap::new();
    for _ in 0..slot_count {
        let name = String::from_utf8(d.bytes16()?.to_vec()).map_err(|e| Error::FormatError(e.to_string()))?;
        let values = d.f32s(stored_dim)?;
        slots.insert(name, values);
    }
    let vector = d.f32s(stored_dim)?;
    Ok(StoreSnapshotRecord {
        key,
        entry: EmbeddingEntry {
            vector,
            frequency,
            slots,
            last_update_step,
        },
    })
}

/// Encodes a whole snapshot into memory.
pub fn encode_snapshot<'a, I>(config_digest: u64, stored_dim: usize, records: I) -> Vec<u8>
where
    I: IntoIterator<Item = (&'a EmbeddingKey, &'a EmbeddingEntry)>,
{
    let mut body = Encoder::new();
    let mut count = 0u64;
    for (k, v) in records {
        encode_record(&mut body, k, v);
        count += 1;
    }
    let mut out = Encoder::with_capacity(HEADER_LEN + body.len());
    SnapshotHeader {
        config_digest,
        stored_dim: stored_dim as u32,
        record_count: count,
    }
    .encode(&mut out);
    out.raw(body.as_slice());
    out.finish()
}

/// Parses a snapshot, checking that records are well-formed and keys unique.
pub fn decode_snapshot(bytes: &[u8]) -> Result<(SnapshotHeader, Vec<StoreSnapshotRecord>)> {
    let mut d = Decoder::new(bytes);
    let header = SnapshotHeader::decode(&mut d)?;
    let dim = header.stored_dim as usize;
    let mut records = Vec::with_capacity(header.record_count.min(1 << 20) as usize);
    let mut seen = std::collections::HashSet::new();
    for _ in 0..header.record_count {
        let r = decode_record(&mut d, dim)?;
        if !seen.insert(r.key.clone()) {
            return Err(Error::FormatError(format!("duplicate key {:?} in snapshot", r.key)));
        }
        records.push(r);
    }
    d.expect_end()?;
    Ok((header, records))
}

pub fn read_header(path: &Path) -> Result<SnapshotHeader> {
    let mut f = File::open(path)?;
    let mut buf = [0u8; HEADER_LEN];
    f.read_exact(&mut buf)
        .map_err(|e| Error::FormatError(format!("{}: {e}", path.display())))?;
    SnapshotHeader::decode(&mut Decoder::new(&buf))
}

pub fn read_snapshot_file(path: &Path) -> Result<(SnapshotHeader, Vec<StoreSnapshotRecord>)> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    decode_snapshot(&bytes)
}

/// Writes `bytes` to `path` through a temporary file and rename, so readers
/// only ever observe a complete file.
pub fn write_file_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}tmp",
        path.extension()
            .map(|e| format!("{}.", e.to_string_lossy()))
            .unwrap_or_default()
    ));
    let write = || -> std::io::Result<()> {
        let mut f = BufWriter::new(File::create(&tmp)?);
        f.write_all(bytes)?;
        f.into_inner().map_err(|e| e.into_error())?.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| Error::SinkWriteFailure(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(k: &str, freq: u64, v: Vec<f32>) -> (EmbeddingKey, EmbeddingEntry) {
        let mut e = EmbeddingEntry::new(v.clone());
        e.frequency = freq;
        e.last_update_step = freq * 10;
        e.slots.insert("momentum".into(), v.iter().map(|x| x * 2.0).collect());
        (EmbeddingKey::try_from(k).unwrap(), e)
    }

    #[test]
    fn layout_is_bit_exact() {
        let (k, e) = rec("ab", 3, vec![1.0, -2.0]);
        let bytes = encode_snapshot(0x1122334455667788, 2, [(&k, &e)]);
        let mut expect = Vec::new();
        expect.extend_from_slice(b"DESNAP01");
        expect.extend_from_slice(&0x1122334455667788u64.to_le_bytes());
        expect.extend_from_slice(&2u32.to_le_bytes());
        expect.extend_from_slice(&1u64.to_le_bytes());
        expect.extend_from_slice(&2u32.to_le_bytes());
        expect.extend_from_slice(b"ab");
        expect.extend_from_slice(&3u64.to_le_bytes());
        expect.extend_from_slice(&30u64.to_le_bytes());
        expect.extend_from_slice(&1u16.to_le_bytes());
        expect.extend_from_slice(&8u16.to_le_bytes());
        expect.extend_from_slice(b"momentum");
        for x in [2.0f32, -4.0, 1.0, -2.0] {
            expect.extend_from_slice(&x.to_le_bytes());
        }
        assert_eq!(bytes, expect);
    }

    #[test]
    fn decode_round_trip_and_errors() {
        let a = rec("a", 1, vec![0.5, 0.25]);
        let b = rec("b", 2, vec![1.5, 2.25]);
        let bytes = encode_snapshot(9, 2, [(&a.0, &a.1), (&b.0, &b.1)]);
        let (h, recs) = decode_snapshot(&bytes).unwrap();
        assert_eq!(h.record_count, 2);
        assert_eq!(recs[1].entry, b.1);

        assert!(matches!(
            decode_snapshot(&bytes[..bytes.len() - 1]),
            Err(Error::FormatError(_))
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_snapshot(&bad), Err(Error::FormatError(_))));
        let dup = encode_snapshot(9, 2, [(&a.0, &a.1), (&a.0, &a.1)]);
        assert!(matches!(decode_snapshot(&dup), Err(Error::FormatError(_))));
    }
}
