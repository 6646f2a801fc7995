//! File-backed store: a sealed snapshot plus a write-ahead log.
//!
//! Every mutation is appended to `NAME.SHARD.wal` and flushed before the call
//! returns, so a killed process loses no acknowledged write. [`Backend::seal`]
//! writes the full state to a new immutable `NAME.SHARD.sealed` file (via
//! rename) and truncates the log. Opening replays the sealed file and then the
//! log; a torn record at the log tail is ignored.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use indexmap::IndexMap;

use super::memory::MemoryBackend;
use super::snapshot::{decode_record, encode_record, encode_snapshot, read_snapshot_file, write_file_atomic};
use super::Backend;
use crate::codec::{Decoder, Encoder};
use crate::entry::EmbeddingEntry;
use crate::error::{Error, Result};
use crate::key::EmbeddingKey;

const WAL_MAGIC: &[u8; 8] = b"DEWAL001";

pub struct FileBackend {
    mem: MemoryBackend,
    wal: Mutex<BufWriter<File>>,
    wal_path: PathBuf,
    sealed_path: PathBuf,
    config_digest: u64,
    stored_dim: usize,
}

impl FileBackend {
    pub fn open(dir: &Path, table: &str, shard: u32, config_digest: u64, stored_dim: usize) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::BackendUnavailable(format!("{}: {e}", dir.display())))?;
        let sealed_path = dir.join(format!("{table}.{shard}.sealed"));
        let wal_path = dir.join(format!("{table}.{shard}.wal"));

        let (records, valid_end) = replay(&sealed_path, &wal_path, config_digest, stored_dim)?;
        if let Some(end) = valid_end {
            let f = OpenOptions::new().write(true).open(&wal_path)?;
            f.set_len(end)?;
        }

        let wal = open_wal(&wal_path, config_digest, stored_dim)?;
        Ok(Self {
            mem: MemoryBackend::from_records(records),
            wal: Mutex::new(wal),
            wal_path,
            sealed_path,
            config_digest,
            stored_dim,
        })
    }

    pub fn sealed_path(&self) -> &Path {
        &self.sealed_path
    }

    /// Reads a shard's persisted state without writing anything.
    /// Returns `None` if the shard has no files in `dir`.
    pub fn load_read_only(
        dir: &Path,
        table: &str,
        shard: u32,
        config_digest: u64,
        stored_dim: usize,
    ) -> Result<Option<IndexMap<EmbeddingKey, EmbeddingEntry>>> {
        let sealed_path = dir.join(format!("{table}.{shard}.sealed"));
        let wal_path = dir.join(format!("{table}.{shard}.wal"));
        if !sealed_path.exists() && !wal_path.exists() {
            return Ok(None);
        }
        Ok(Some(replay(&sealed_path, &wal_path, config_digest, stored_dim)?.0))
    }
}

/// Replays the sealed file and then the log. Also returns the log length to
/// truncate to when its tail is torn.
fn replay(
    sealed_path: &Path,
    wal_path: &Path,
    config_digest: u64,
    stored_dim: usize,
) -> Result<(IndexMap<EmbeddingKey, EmbeddingEntry>, Option<u64>)> {
    let mut records = IndexMap::new();
    if sealed_path.exists() {
        let (header, recs) = read_snapshot_file(sealed_path)?;
        check_header(
            header.config_digest,
            header.stored_dim as usize,
            config_digest,
            stored_dim,
            sealed_path,
        )?;
        records.extend(recs.into_iter().map(|r| (r.key, r.entry)));
    }
    let mut torn = None;
    if wal_path.exists() {
        let mut bytes = Vec::new();
        File::open(wal_path)?.read_to_end(&mut bytes)?;
        if !bytes.is_empty() {
            let mut d = Decoder::new(&bytes);
            if d.raw(8).ok() != Some(WAL_MAGIC.as_slice()) {
                return Err(Error::FormatError(format!("{}: bad log magic", wal_path.display())));
            }
            let digest = d.u64()?;
            let dim = d.u32()? as usize;
            check_header(digest, dim, config_digest, stored_dim, wal_path)?;
            let mut valid_end = d.position();
            while d.remaining() > 0 {
                match decode_record(&mut d, stored_dim) {
                    Ok(r) => {
                        records.insert(r.key, r.entry);
                        valid_end = d.position();
                    }
                    Err(_) => {
                        log::warn!(
                            "{}: dropping torn tail of {} bytes",
                            wal_path.display(),
                            bytes.len() - valid_end
                        );
                        break;
                    }
                }
            }
            if valid_end < bytes.len() {
                torn = Some(valid_end as u64);
            }
        }
    }
    Ok((records, torn))
}

fn check_header(digest: u64, dim: usize, want_digest: u64, want_dim: usize, path: &Path) -> Result<()> {
    if digest != want_digest {
        return Err(Error::DigestMismatch(format!(
            "{}: file digest {digest:016x}, table digest {want_digest:016x}",
            path.display()
        )));
    }
    if dim != want_dim {
        return Err(Error::DimensionMismatch {
            expected: want_dim,
            got: dim,
        });
    }
    Ok(())
}

fn open_wal(path: &Path, digest: u64, dim: usize) -> Result<BufWriter<File>> {
    let fresh = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::BackendUnavailable(format!("{}: {e}", path.display())))?;
    let mut w = BufWriter::new(f);
    if fresh {
        let mut e = Encoder::new();
        e.raw(WAL_MAGIC).u64(digest).u32(dim as u32);
        w.write_all(e.as_slice())?;
        w.flush()?;
    }
    Ok(w)
}

impl Backend for FileBackend {
    fn get(&self, keys: &[EmbeddingKey]) -> Result<Vec<Option<EmbeddingEntry>>> {
        self.mem.get(keys)
    }

    fn put(&self, entries: &[(EmbeddingKey, EmbeddingEntry)]) -> Result<()> {
        let mut e = Encoder::new();
        for (k, v) in entries {
            encode_record(&mut e, k, v);
        }
        {
            let mut wal = self.wal.lock().unwrap();
            wal.write_all(e.as_slice())
                .and_then(|_| wal.flush())
                .map_err(|err| Error::BackendUnavailable(format!("{}: {err}", self.wal_path.display())))?;
        }
        self.mem.put(entries)
    }

    fn len(&self) -> Result<usize> {
        self.mem.len()
    }

    fn scan(&self) -> Result<Vec<(EmbeddingKey, EmbeddingEntry)>> {
        self.mem.scan()
    }

    fn frequencies(&self) -> Result<Vec<(EmbeddingKey, u64)>> {
        self.mem.frequencies()
    }

    fn visit(&self, f: &mut dyn FnMut(&EmbeddingKey, &EmbeddingEntry)) -> Result<()> {
        self.mem.visit(f)
    }

    fn seal(&self) -> Result<()> {
        let mut wal = self.wal.lock().unwrap();
        let records = self.mem.scan()?;
        let bytes = encode_snapshot(self.config_digest, self.stored_dim, records.iter().map(|(k, v)| (k, v)));
        write_file_atomic(&self.sealed_path, &bytes)?;
        let f = OpenOptions::new().write(true).truncate(true).open(&self.wal_path)?;
        drop(f);
        *wal = open_wal(&self.wal_path, self.config_digest, self.stored_dim)?;
        Ok(())
    }
}
