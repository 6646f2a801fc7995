//! The per-shard embedding store and its storage backends.
//!
//! [`EmbeddingStore`] owns the table semantics (first-seen materialization,
//! optimizer application, lifetime filtering, import/export) and delegates
//! raw key/value persistence to a [`Backend`]:
//!
//! * [`MemoryBackend`]: everything resident in memory.
//! * [`FileBackend`]: memory plus a write-ahead log and sealed snapshot files.
//! * [`CachedRemoteBackend`]: write-through LRU cache over a [`RemoteKv`].
//!
//! A store is single-writer, multi-reader: mutations are serialized by an
//! internal lock, reads go straight to the backend, which never exposes a
//! partially written entry.

pub mod bloom;
pub mod file;
pub mod memory;
pub mod remote;
pub mod snapshot;

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use xxhash_rust::xxh64::Xxh64;

use crate::codec::Encoder;
use crate::config::{StorageBackend, TableConfig};
use crate::entry::EmbeddingEntry;
use crate::error::{Error, Result};
use crate::init::init_vector;
use crate::key::{key_hash, EmbeddingKey};
use crate::optim::{aggregate_duplicates, apply_gradient};

pub use bloom::{bloom_admit, CountingBloomFilter};
pub use file::FileBackend;
pub use memory::MemoryBackend;
pub use remote::{CachedRemoteBackend, FileKv, MemoryKv, RemoteKv, RemoteRegistry};
pub use snapshot::{SnapshotHeader, StoreSnapshotRecord};

/// Raw key/value persistence behind an [`EmbeddingStore`].
pub trait Backend: Send + Sync {
    fn get(&self, keys: &[EmbeddingKey]) -> Result<Vec<Option<EmbeddingEntry>>>;
    /// Inserts or overwrites. New keys are appended to the iteration order.
    fn put(&self, entries: &[(EmbeddingKey, EmbeddingEntry)]) -> Result<()>;
    fn len(&self) -> Result<usize>;
    fn is_empty(&self) -> Result<bool> {
        Ok(self.len()? == 0)
    }
    /// All entries in a stable order.
    fn scan(&self) -> Result<Vec<(EmbeddingKey, EmbeddingEntry)>>;
    /// Keys and frequencies in the same stable order as [`Backend::scan`].
    fn frequencies(&self) -> Result<Vec<(EmbeddingKey, u64)>>;
    fn visit(&self, f: &mut dyn FnMut(&EmbeddingKey, &EmbeddingEntry)) -> Result<()>;
    /// Makes the current state durable as an immutable file, where applicable.
    fn seal(&self) -> Result<()> {
        Ok(())
    }
}

/// Where a worker keeps file-backed tables and which remote stores it can reach.
#[derive(Debug, Clone, Default)]
pub struct StorageRoot {
    pub data_dir: Option<PathBuf>,
    pub remotes: RemoteRegistry,
}

impl StorageRoot {
    pub fn memory_only() -> Self {
        Self::default()
    }

    pub fn with_data_dir(dir: impl Into<PathBuf>) -> Self {
        Self {
            data_dir: Some(dir.into()),
            remotes: RemoteRegistry::new(),
        }
    }

    pub fn resolve(&self, path: &str) -> Result<PathBuf> {
        let p = Path::new(path);
        if p.is_absolute() {
            return Ok(p.to_path_buf());
        }
        match &self.data_dir {
            Some(root) => Ok(root.join(p)),
            None => Err(Error::BackendUnavailable(format!(
                "relative snapshot path `{path}` but the worker has no data directory"
            ))),
        }
    }
}

pub struct EmbeddingStore {
    config: TableConfig,
    digest: u64,
    stored_dim: usize,
    backend: Box<dyn Backend>,
    bloom: Option<Mutex<CountingBloomFilter>>,
    write_lock: Mutex<()>,
}

impl std::fmt::Debug for EmbeddingStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EmbeddingStore")
            .field("table", &self.config.name)
            .field("digest", &format_args!("{:016x}", self.digest))
            .finish()
    }
}

impl EmbeddingStore {
    /// Opens the backend named by `config.backend` for shard `shard_id` of `n_workers`.
    pub fn open(config: TableConfig, shard_id: u32, n_workers: u32, root: &StorageRoot) -> Result<Self> {
        let backend = config.backend.clone();
        Self::open_with(config, &backend, shard_id, n_workers, root)
    }

    /// Like [`EmbeddingStore::open`] but stores the table in `backend`
    /// instead of the one its config names.
    pub fn open_with(
        config: TableConfig,
        backend: &StorageBackend,
        shard_id: u32,
        n_workers: u32,
        root: &StorageRoot,
    ) -> Result<Self> {
        config.validate()?;
        let digest = config.digest();
        let dim = config.stored_dim();
        let backend: Box<dyn Backend> = match backend {
            StorageBackend::InMemory => Box::new(MemoryBackend::new()),
            StorageBackend::FileSnapshot { path } => Box::new(FileBackend::open(
                &root.resolve(path)?,
                &config.name,
                shard_id,
                digest,
                dim,
            )?),
            StorageBackend::CachedRemote {
                remote_name,
                cache_capacity,
            } => Box::new(CachedRemoteBackend::new(
                root.remotes.get(remote_name)?,
                &config.name,
                digest,
                dim,
                *cache_capacity as usize,
                shard_id,
                n_workers,
            )),
        };
        Self::with_backend(config, backend)
    }

    pub fn in_memory(config: TableConfig) -> Result<Self> {
        Self::with_backend(config, Box::new(MemoryBackend::new()))
    }

    pub fn with_backend(config: TableConfig, backend: Box<dyn Backend>) -> Result<Self> {
        config.validate()?;
        let bloom = config
            .lifetime
            .bloom
            .as_ref()
            .map(|b| Mutex::new(CountingBloomFilter::new(b)));
        Ok(Self {
            digest: config.digest(),
            stored_dim: config.stored_dim(),
            config,
            backend,
            bloom,
            write_lock: Mutex::new(()),
        })
    }

    pub fn config(&self) -> &TableConfig {
        &self.config
    }

    pub fn digest(&self) -> u64 {
        self.digest
    }

    pub fn stored_dim(&self) -> usize {
        self.stored_dim
    }

    pub fn len(&self) -> Result<usize> {
        self.backend.len()
    }

    pub fn is_empty(&self) -> Result<bool> {
        Ok(self.len()? == 0)
    }

    /// Returns one slot per key: `Some(entry)` or `None` (the absent marker).
    ///
    /// With `create_if_missing`, unknown keys are materialized from the
    /// initializer with frequency 0. When the table has a Bloom admission
    /// filter, unknown keys are returned freshly initialized but not stored;
    /// they become resident once an update admits them. Duplicate keys in
    /// one call alias the same entry.
    pub fn lookup(&self, keys: &[EmbeddingKey], create_if_missing: bool) -> Result<Vec<Option<EmbeddingEntry>>> {
        let mut out = self.backend.get(keys)?;
        if !create_if_missing || out.iter().all(Option::is_some) {
            return Ok(out);
        }
        if self.bloom.is_some() {
            for (slot, key) in out.iter_mut().zip(keys) {
                if slot.is_none() {
                    *slot = Some(EmbeddingEntry::new(init_vector(key, &self.config)));
                }
            }
            return Ok(out);
        }

        let _guard = self.write_lock.lock().unwrap();
        // Re-read under the lock: another writer may have created some of them.
        let missing: Vec<usize> = (0..keys.len()).filter(|&i| out[i].is_none()).collect();
        let missing_keys: Vec<EmbeddingKey> = missing.iter().map(|&i| keys[i].clone()).collect();
        let fresh = self.backend.get(&missing_keys)?;
        let mut created: HashMap<EmbeddingKey, EmbeddingEntry> = HashMap::new();
        let mut to_put = Vec::new();
        for ((&i, key), found) in missing.iter().zip(&missing_keys).zip(fresh) {
            let entry = match found {
                Some(e) => e,
                None => match created.get(key) {
                    Some(e) => e.clone(),
                    None => {
                        let e = EmbeddingEntry::new(init_vector(key, &self.config));
                        created.insert(key.clone(), e.clone());
                        to_put.push((key.clone(), e.clone()));
                        e
                    }
                },
            };
            out[i] = Some(entry);
        }
        if !to_put.is_empty() {
            self.backend.put(&to_put)?;
        }
        Ok(out)
    }

    /// Writes whole entries (assign semantics). Every entry is validated first;
    /// nothing is written if any is invalid.
    pub fn update(&self, assignments: Vec<(EmbeddingKey, EmbeddingEntry)>) -> Result<()> {
        for (_, e) in &assignments {
            e.validate(self.stored_dim)?;
        }
        let _guard = self.write_lock.lock().unwrap();
        self.backend.put(&assignments)
    }

    /// Passes a non-resident key through the admission filter. Without a
    /// filter every key is admitted.
    fn admit(&self, key: &EmbeddingKey) -> bool {
        match &self.bloom {
            None => true,
            Some(b) => bloom_admit(&mut b.lock().unwrap(), key),
        }
    }

    /// Replaces stored vectors, keeping frequency and slots. Returns how many
    /// pairs were applied (non-admitted new keys are dropped).
    pub fn assign_vectors(
        &self,
        pairs: Vec<(EmbeddingKey, Vec<f32>)>,
        global_step: u64,
        update_frequency: bool,
    ) -> Result<usize> {
        for (_, v) in &pairs {
            if v.len() != self.stored_dim {
                return Err(Error::DimensionMismatch {
                    expected: self.stored_dim,
                    got: v.len(),
                });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteValue("assigned vector".into()));
            }
        }
        let _guard = self.write_lock.lock().unwrap();
        let keys: Vec<EmbeddingKey> = pairs.iter().map(|(k, _)| k.clone()).collect();
        let current = self.backend.get(&keys)?;
        let mut staged: indexmap::IndexMap<EmbeddingKey, EmbeddingEntry> = indexmap::IndexMap::new();
        for ((key, vector), existing) in pairs.into_iter().zip(current) {
            let mut entry = match staged.swap_remove(&key).or(existing) {
                Some(e) => e,
                None if self.admit(&key) => EmbeddingEntry::default(),
                None => continue,
            };
            entry.vector = vector;
            if update_frequency {
                entry.frequency += 1;
            }
            entry.last_update_step = global_step;
            staged.insert(key, entry);
        }
        let n = staged.len();
        let staged: Vec<_> = staged.into_iter().collect();
        self.backend.put(&staged)?;
        Ok(n)
    }

    /// Aggregates duplicate keys and applies the table optimizer with `lr`.
    ///
    /// Keys never seen before are materialized from the initializer first
    /// (subject to the admission filter). The batch is all-or-nothing: on any
    /// error no entry is written. Returns the number of distinct keys updated.
    pub fn apply_gradients(
        &self,
        pairs: Vec<(EmbeddingKey, Vec<f32>)>,
        lr: f32,
        global_step: u64,
        update_frequency: bool,
    ) -> Result<usize> {
        let unique = aggregate_duplicates(pairs)?;
        for (_, g) in &unique {
            if g.len() != self.stored_dim {
                return Err(Error::DimensionMismatch {
                    expected: self.stored_dim,
                    got: g.len(),
                });
            }
        }
        let _guard = self.write_lock.lock().unwrap();
        let keys: Vec<EmbeddingKey> = unique.iter().map(|(k, _)| k.clone()).collect();
        let current = self.backend.get(&keys)?;
        let mut staged = Vec::with_capacity(unique.len());
        for ((key, grad), existing) in unique.into_iter().zip(current) {
            let mut entry = match existing {
                Some(e) => e,
                None if self.admit(&key) => EmbeddingEntry::new(init_vector(&key, &self.config)),
                None => continue,
            };
            apply_gradient(
                &mut entry,
                &grad,
                &self.config.optimizer,
                lr,
                update_frequency,
                global_step,
            )?;
            staged.push((key, entry));
        }
        self.backend.put(&staged)?;
        Ok(staged.len())
    }

    /// Keys and frequencies in stable order: the universe for candidate sampling.
    pub fn sampling_index(&self) -> Result<Vec<(EmbeddingKey, u64)>> {
        self.backend.frequencies()
    }

    pub fn visit(&self, f: &mut dyn FnMut(&EmbeddingKey, &EmbeddingEntry)) -> Result<()> {
        self.backend.visit(f)
    }

    pub fn scan(&self) -> Result<Vec<(EmbeddingKey, EmbeddingEntry)>> {
        self.backend.scan()
    }

    /// Encodes a snapshot of every entry with `frequency >= frequency_cutoff`.
    pub fn export_bytes(&self) -> Result<(Vec<u8>, u64)> {
        let cutoff = self.config.lifetime.frequency_cutoff;
        let records: Vec<_> = self
            .backend
            .scan()?
            .into_iter()
            .filter(|(_, e)| e.frequency >= cutoff)
            .collect();
        let n = records.len() as u64;
        let bytes = snapshot::encode_snapshot(self.digest, self.stored_dim, records.iter().map(|(k, v)| (k, v)));
        Ok((bytes, n))
    }

    /// Writes the export snapshot to `sink`; returns the record count.
    pub fn export<W: Write>(&self, mut sink: W) -> Result<u64> {
        let (bytes, n) = self.export_bytes()?;
        sink.write_all(&bytes)
            .and_then(|_| sink.flush())
            .map_err(|e| Error::SinkWriteFailure(e.to_string()))?;
        Ok(n)
    }

    /// Exports to a file that appears atomically once complete.
    pub fn export_to_file(&self, path: &Path) -> Result<u64> {
        let (bytes, n) = self.export_bytes()?;
        snapshot::write_file_atomic(path, &bytes)?;
        Ok(n)
    }

    /// Imports every record of a snapshot, overwriting existing keys.
    pub fn import(&self, bytes: &[u8]) -> Result<u64> {
        self.import_filtered(bytes, |_| true)
    }

    /// Imports the records whose key passes `keep`.
    pub fn import_filtered(&self, bytes: &[u8], keep: impl Fn(&EmbeddingKey) -> bool) -> Result<u64> {
        let (header, records) = snapshot::decode_snapshot(bytes)?;
        if header.stored_dim as usize != self.stored_dim {
            return Err(Error::DimensionMismatch {
                expected: self.stored_dim,
                got: header.stored_dim as usize,
            });
        }
        if header.config_digest != self.digest {
            return Err(Error::DigestMismatch(format!(
                "snapshot digest {:016x}, table `{}` digest {:016x}",
                header.config_digest, self.config.name, self.digest
            )));
        }
        let records: Vec<(EmbeddingKey, EmbeddingEntry)> = records
            .into_iter()
            .filter(|r| keep(&r.key))
            .map(|r| (r.key, r.entry))
            .collect();
        for (_, e) in &records {
            e.validate(self.stored_dim)?;
        }
        let n = records.len() as u64;
        let _guard = self.write_lock.lock().unwrap();
        self.backend.put(&records)?;
        Ok(n)
    }

    /// Imports a snapshot file, keeping only keys owned by `shard_id` of `n_workers`.
    pub fn import_file_for_shard(&self, path: &Path, shard_id: u32, n_workers: u32) -> Result<u64> {
        let bytes = std::fs::read(path).map_err(|e| Error::PartialCheckpoint(format!("{}: {e}", path.display())))?;
        let n = n_workers.max(1) as u64;
        self.import_filtered(&bytes, |k| key_hash(k) % n == shard_id as u64)
    }

    /// Order-independent fingerprint of the full contents.
    pub fn content_digest(&self) -> Result<u64> {
        let mut records = self.backend.scan()?;
        records.sort_by(|a, b| a.0.cmp(&b.0));
        let mut h = Xxh64::new(0);
        for (k, e) in &records {
            let mut enc = Encoder::new();
            snapshot::encode_record(&mut enc, k, e);
            h.update(enc.as_slice());
        }
        Ok(h.digest())
    }

    pub fn seal(&self) -> Result<()> {
        let _guard = self.write_lock.lock().unwrap();
        self.backend.seal()
    }
}
