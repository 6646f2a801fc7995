//! Remote key-value storage and the local LRU cache in front of it.
//!
//! The remote interface is deliberately small: batched get, batched put and
//! scan-by-prefix. Two fakes implement it: [`MemoryKv`] (in-process, with
//! call counters and an availability switch for failure tests) and
//! [`FileKv`] (an append-only log in a directory, durable across restarts).

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Read, Write};
use std::num::NonZeroUsize;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use indexmap::IndexMap;
use lru::LruCache;

use super::snapshot::{decode_record, encode_record};
use super::Backend;
use crate::codec::{Decoder, Encoder};
use crate::entry::EmbeddingEntry;
use crate::error::{Error, Result};
use crate::key::{key_hash, EmbeddingKey};

pub trait RemoteKv: Send + Sync {
    fn batch_get(&self, keys: &[Vec<u8>]) -> Result<Vec<Option<Vec<u8>>>>;
    fn batch_put(&self, pairs: Vec<(Vec<u8>, Vec<u8>)>) -> Result<()>;
    /// All pairs whose key starts with `prefix`, in ascending key order.
    fn scan_prefix(&self, prefix: &[u8]) -> Result<Vec<(Vec<u8>, Vec<u8>)>>;
}

#[derive(Debug, Default)]
pub struct KvCounters {
    pub get_calls: AtomicU64,
    pub keys_fetched: AtomicU64,
    pub put_calls: AtomicU64,
    pub scan_calls: AtomicU64,
}

impl KvCounters {
    pub fn get_calls(&self) -> u64 {
        self.get_calls.load(Ordering::SeqCst)
    }

    pub fn keys_fetched(&self) -> u64 {
        self.keys_fetched.load(Ordering::SeqCst)
    }

    pub fn put_calls(&self) -> u64 {
        self.put_calls.load(Ordering::SeqCst)
    }
}

/// In-process fake of a remote table store.
#[derive(Debug)]
pub struct MemoryKv {
    data: RwLock<BTreeMap<Vec<u8>, Vec<u8>>>,
    available: AtomicBool,
    pub counters: KvCounters,
}

impl Default for MemoryKv {
    fn default() -> Self {
        Self {
            data: RwLock::default(),
            available: AtomicBool::new(true),
            counters: KvCounters::default(),
        }
    }
}

impl MemoryKv {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_available(&self, up: bool) {
        self.available.store(up, Ordering::SeqCst);
    }

    pub fn len(&self) -> usize {
        self.data.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check(&self) -> Result<()> {
        if self.available.load(Ordering::SeqCst) {
            Ok(())
        } else {
            Err(Error::BackendUnavailable("remote store is down".into()))
        }
    }
}

impl RemoteKv for MemoryKv {
    fn batch_get(&self, keys: &[Vec<u8>]) -> Result<Vec<Option<Vec<u8>>>> {
        self.check()?;
        self.counters.get_calls.fetch_add(1, Ordering::SeqCst);
        self.counters
            .keys_fetched
            .fetch_add(keys.len() as u64, Ordering::SeqCst);
        let data = self.data.read().unwrap();
        Ok(keys.iter().map(|k| data.get(k).cloned()).collect())
    }

    fn batch_put(&self, pairs: Vec<(Vec<u8>, Vec<u8>)>) -> Result<()> {
        self.check()?;
        self.counters.put_calls.fetch_add(1, Ordering::SeqCst);
        self.data.write().unwrap().extend(pairs);
        Ok(())
    }

    fn scan_prefix(&self, prefix: &[u8]) -> Result<Vec<(Vec<u8>, Vec<u8>)>> {
        self.check()?;
        self.counters.scan_calls.fetch_add(1, Ordering::SeqCst);
        let data = self.data.read().unwrap();
        Ok(data
            .range(prefix.to_vec()..)
            .take_while(|(k, _)| k.starts_with(prefix))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect())
    }
}

/// Durable fake: an append-only log of `{u32 klen, key, u32 vlen, value}`
/// records in `DIR/kv.log`, indexed in memory.
pub struct FileKv {
    data: RwLock<BTreeMap<Vec<u8>, Vec<u8>>>,
    log: Mutex<BufWriter<File>>,
    path: PathBuf,
    pub counters: KvCounters,
}

impl FileKv {
    pub fn open(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::BackendUnavailable(format!("{}: {e}", dir.display())))?;
        let path = dir.join("kv.log");
        let mut data = BTreeMap::new();
        if path.exists() {
            let mut bytes = Vec::new();
            File::open(&path)?.read_to_end(&mut bytes)?;
            let mut d = Decoder::new(&bytes);
            let mut valid_end = 0;
            while d.remaining() > 0 {
                let rec = (|| -> Result<(Vec<u8>, Vec<u8>)> { Ok((d.bytes32()?.to_vec(), d.bytes32()?.to_vec())) })();
                match rec {
                    Ok((k, v)) => {
                        data.insert(k, v);
                        valid_end = d.position();
                    }
                    Err(_) => break,
                }
            }
            if valid_end < bytes.len() {
                OpenOptions::new().write(true).open(&path)?.set_len(valid_end as u64)?;
            }
        }
        let f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::BackendUnavailable(format!("{}: {e}", path.display())))?;
        Ok(Self {
            data: RwLock::new(data),
            log: Mutex::new(BufWriter::new(f)),
            path,
            counters: KvCounters::default(),
        })
    }
}

impl RemoteKv for FileKv {
    fn batch_get(&self, keys: &[Vec<u8>]) -> Result<Vec<Option<Vec<u8>>>> {
        self.counters.get_calls.fetch_add(1, Ordering::SeqCst);
        self.counters
            .keys_fetched
            .fetch_add(keys.len() as u64, Ordering::SeqCst);
        let data = self.data.read().unwrap();
        Ok(keys.iter().map(|k| data.get(k).cloned()).collect())
    }

    fn batch_put(&self, pairs: Vec<(Vec<u8>, Vec<u8>)>) -> Result<()> {
        self.counters.put_calls.fetch_add(1, Ordering::SeqCst);
        let mut e = Encoder::new();
        for (k, v) in &pairs {
            e.bytes32(k).bytes32(v);
        }
        let mut log = self.log.lock().unwrap();
        log.write_all(e.as_slice())
            .and_then(|_| log.flush())
            .map_err(|err| Error::BackendUnavailable(format!("{}: {err}", self.path.display())))?;
        self.data.write().unwrap().extend(pairs);
        Ok(())
    }

    fn scan_prefix(&self, prefix: &[u8]) -> Result<Vec<(Vec<u8>, Vec<u8>)>> {
        self.counters.scan_calls.fetch_add(1, Ordering::SeqCst);
        let data = self.data.read().unwrap();
        Ok(data
            .range(prefix.to_vec()..)
            .take_while(|(k, _)| k.starts_with(prefix))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect())
    }
}

/// Named remote stores visible to a worker.
#[derive(Clone, Default)]
pub struct RemoteRegistry {
    inner: Arc<RwLock<HashMap<String, Arc<dyn RemoteKv>>>>,
}

impl RemoteRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&self, name: impl Into<String>, kv: Arc<dyn RemoteKv>) {
        self.inner.write().unwrap().insert(name.into(), kv);
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn RemoteKv>> {
        self.inner
            .read()
            .unwrap()
            .get(name)
            .cloned()
            .ok_or_else(|| Error::BackendUnavailable(format!("no remote store named `{name}`")))
    }
}

impl std::fmt::Debug for RemoteRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let names: Vec<String> = self.inner.read().unwrap().keys().cloned().collect();
        f.debug_struct("RemoteRegistry").field("names", &names).finish()
    }
}

/// Write-through LRU cache over a [`RemoteKv`].
///
/// Lookups are served from the cache when possible; all misses of one call
/// are fetched with a single `batch_get`. Writes go to the remote first and
/// then to the cache. Nothing is preloaded: the key index used for sampling,
/// sizing and export is built by one prefix scan the first time it is needed.
pub struct CachedRemoteBackend {
    remote: Arc<dyn RemoteKv>,
    prefix: Vec<u8>,
    stored_dim: usize,
    shard_id: u32,
    n_workers: u32,
    cache: Mutex<LruCache<EmbeddingKey, EmbeddingEntry>>,
    index: Mutex<Option<IndexMap<EmbeddingKey, u64>>>,
}

impl CachedRemoteBackend {
    pub fn new(
        remote: Arc<dyn RemoteKv>,
        table: &str,
        config_digest: u64,
        stored_dim: usize,
        cache_capacity: usize,
        shard_id: u32,
        n_workers: u32,
    ) -> Self {
        let mut prefix = Vec::with_capacity(table.len() + 18);
        prefix.extend_from_slice(table.as_bytes());
        prefix.push(0);
        prefix.extend_from_slice(format!("{config_digest:016x}").as_bytes());
        prefix.push(0);
        Self {
            remote,
            prefix,
            stored_dim,
            shard_id,
            n_workers: n_workers.max(1),
            cache: Mutex::new(LruCache::new(NonZeroUsize::new(cache_capacity.max(1)).unwrap())),
            index: Mutex::new(None),
        }
    }

    fn remote_key(&self, key: &EmbeddingKey) -> Vec<u8> {
        let mut k = self.prefix.clone();
        k.extend_from_slice(key.as_bytes());
        k
    }

    fn owns(&self, key: &EmbeddingKey) -> bool {
        key_hash(key) % self.n_workers as u64 == self.shard_id as u64
    }

    fn decode_value(&self, key: &EmbeddingKey, bytes: &[u8]) -> Result<EmbeddingEntry> {
        let rec = decode_record(&mut Decoder::new(bytes), self.stored_dim)?;
        if &rec.key != key {
            return Err(Error::FormatError(format!(
                "remote value for {key:?} names {:?}",
                rec.key
            )));
        }
        Ok(rec.entry)
    }

    fn scan_owned(&self) -> Result<Vec<(EmbeddingKey, EmbeddingEntry)>> {
        let pairs = self.remote.scan_prefix(&self.prefix)?;
        let mut out = Vec::with_capacity(pairs.len());
        for (k, v) in pairs {
            let key =
                EmbeddingKey::new(k[self.prefix.len()..].to_vec()).map_err(|e| Error::FormatError(e.to_string()))?;
            if !self.owns(&key) {
                continue;
            }
            let entry = self.decode_value(&key, &v)?;
            out.push((key, entry));
        }
        Ok(out)
    }

    fn with_index<R>(&self, f: impl FnOnce(&IndexMap<EmbeddingKey, u64>) -> R) -> Result<R> {
        let mut guard = self.index.lock().unwrap();
        if guard.is_none() {
            let idx = self.scan_owned()?.into_iter().map(|(k, e)| (k, e.frequency)).collect();
            *guard = Some(idx);
        }
        Ok(f(guard.as_ref().unwrap()))
    }

    /// Number of entries currently held in the local cache.
    pub fn cached_len(&self) -> usize {
        self.cache.lock().unwrap().len()
    }
}

impl Backend for CachedRemoteBackend {
    fn get(&self, keys: &[EmbeddingKey]) -> Result<Vec<Option<EmbeddingEntry>>> {
        let mut out: Vec<Option<EmbeddingEntry>> = vec![None; keys.len()];
        let mut misses: IndexMap<EmbeddingKey, Vec<usize>> = IndexMap::new();
        {
            let mut cache = self.cache.lock().unwrap();
            for (i, k) in keys.iter().enumerate() {
                match cache.get(k) {
                    Some(e) => out[i] = Some(e.clone()),
                    None => misses.entry(k.clone()).or_default().push(i),
                }
            }
        }
        if misses.is_empty() {
            return Ok(out);
        }
        let remote_keys: Vec<Vec<u8>> = misses.keys().map(|k| self.remote_key(k)).collect();
        let fetched = self.remote.batch_get(&remote_keys)?;
        let mut cache = self.cache.lock().unwrap();
        for ((key, positions), value) in misses.into_iter().zip(fetched) {
            if let Some(bytes) = value {
                let entry = self.decode_value(&key, &bytes)?;
                for &i in &positions {
                    out[i] = Some(entry.clone());
                }
                cache.put(key, entry);
            }
        }
        Ok(out)
    }

    fn put(&self, entries: &[(EmbeddingKey, EmbeddingEntry)]) -> Result<()> {
        let pairs = entries
            .iter()
            .map(|(k, v)| {
                let mut e = Encoder::new();
                encode_record(&mut e, k, v);
                (self.remote_key(k), e.finish())
            })
            .collect();
        self.remote.batch_put(pairs)?;
        let mut cache = self.cache.lock().unwrap();
        let mut index = self.index.lock().unwrap();
        for (k, v) in entries {
            cache.put(k.clone(), v.clone());
            if let Some(idx) = index.as_mut() {
                idx.insert(k.clone(), v.frequency);
            }
        }
        Ok(())
    }

    fn len(&self) -> Result<usize> {
        self.with_index(|idx| idx.len())
    }

    fn scan(&self) -> Result<Vec<(EmbeddingKey, EmbeddingEntry)>> {
        self.scan_owned()
    }

    fn frequencies(&self) -> Result<Vec<(EmbeddingKey, u64)>> {
        self.with_index(|idx| idx.iter().map(|(k, f)| (k.clone(), *f)).collect())
    }

    fn visit(&self, f: &mut dyn FnMut(&EmbeddingKey, &EmbeddingEntry)) -> Result<()> {
        for (k, e) in self.scan_owned()? {
            f(&k, &e);
        }
        Ok(())
    }
}
