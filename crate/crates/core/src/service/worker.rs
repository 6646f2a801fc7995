//! A worker owns one shard of every table.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use super::protocol::{Request, Response, Role, TableStats, UpdateMode, PROTOCOL_VERSION};
use super::Handler;
use crate::config::{StorageBackend, TableConfig};
use crate::error::{Error, Result};
use crate::retrieval::worker_top_k;
use crate::sampler::shard_sample;
use crate::store::{EmbeddingStore, FileBackend, MemoryBackend, StorageRoot};

/// Default cache size when `--backend remote:NAME` overrides a table that
/// did not ask for a remote backend itself.
pub const DEFAULT_CACHE_CAPACITY: u64 = 100_000;

/// Where a worker keeps its tables, regardless of what their configs say.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum BackendOverride {
    /// Use each table's configured backend.
    #[default]
    AsConfigured,
    Memory,
    File(PathBuf),
    Remote(String),
}

impl std::str::FromStr for BackendOverride {
    type Err = Error;

    /// Parses `memory`, `file:DIR`, `remote:NAME` or `config`.
    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            None if s == "memory" => Ok(Self::Memory),
            None if s == "config" => Ok(Self::AsConfigured),
            Some(("file", dir)) if !dir.is_empty() => Ok(Self::File(dir.into())),
            Some(("remote", name)) if !name.is_empty() => Ok(Self::Remote(name.into())),
            _ => Err(Error::InvalidArgument(format!(
                "backend `{s}`: expected memory, file:DIR or remote:NAME"
            ))),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct WorkerOptions {
    pub shard_id: u32,
    pub sandbox: bool,
    pub backend: BackendOverride,
    pub storage: StorageRoot,
}

struct Table {
    store: Arc<EmbeddingStore>,
    n_workers: u32,
}

pub struct Worker {
    opts: WorkerOptions,
    tables: RwLock<HashMap<String, Table>>,
}

impl Worker {
    pub fn new(opts: WorkerOptions) -> Self {
        Self {
            opts,
            tables: RwLock::new(HashMap::new()),
        }
    }

    pub fn shard_id(&self) -> u32 {
        self.opts.shard_id
    }

    pub fn is_sandbox(&self) -> bool {
        self.opts.sandbox
    }

    pub fn store(&self, table: &str) -> Result<Arc<EmbeddingStore>> {
        self.tables
            .read()
            .unwrap()
            .get(table)
            .map(|t| t.store.clone())
            .ok_or_else(|| Error::UnknownTable(table.to_string()))
    }

    fn n_workers(&self, table: &str) -> Result<u32> {
        self.tables
            .read()
            .unwrap()
            .get(table)
            .map(|t| t.n_workers)
            .ok_or_else(|| Error::UnknownTable(table.to_string()))
    }

    fn effective_backend(&self, config: &TableConfig) -> StorageBackend {
        match &self.opts.backend {
            BackendOverride::AsConfigured => config.backend.clone(),
            BackendOverride::Memory => StorageBackend::InMemory,
            BackendOverride::File(dir) => StorageBackend::FileSnapshot {
                path: dir.to_string_lossy().into_owned(),
            },
            BackendOverride::Remote(name) => StorageBackend::CachedRemote {
                remote_name: name.clone(),
                cache_capacity: match &config.backend {
                    StorageBackend::CachedRemote { cache_capacity, .. } => *cache_capacity,
                    _ => DEFAULT_CACHE_CAPACITY,
                },
            },
        }
    }

    /// Loads a checkpoint's shard into this worker, bypassing the sandbox
    /// gate. Used to prepare a sandbox server before it starts serving.
    pub fn preload_checkpoint(&self, dir: &Path, n_workers: u32) -> Result<u64> {
        let manifest = super::checkpoint::CheckpointManifest::read(dir)?;
        manifest.verify(dir)?;
        let mut total = 0;
        for t in &manifest.tables {
            let store = Arc::new(EmbeddingStore::in_memory(t.config.clone())?);
            for f in &t.files {
                total += store.import_file_for_shard(&dir.join(f), self.opts.shard_id, n_workers)?;
            }
            self.tables
                .write()
                .unwrap()
                .insert(t.name.clone(), Table { store, n_workers });
        }
        Ok(total)
    }

    fn create_table(&self, config: TableConfig, n_workers: u32) -> Result<Response> {
        config.validate()?;
        let n_workers = n_workers.max(1);
        if self.opts.shard_id >= n_workers {
            return Err(Error::InvalidArgument(format!(
                "worker holds shard {} but the cluster has {n_workers} workers",
                self.opts.shard_id
            )));
        }
        if let Some(t) = self.tables.read().unwrap().get(&config.name) {
            return if t.store.digest() == config.digest() {
                Ok(Response::Created)
            } else {
                Err(Error::invalid_config(
                    "name",
                    format!("table `{}` already exists with a different config", config.name),
                ))
            };
        }
        let backend = self.effective_backend(&config);
        let store = if self.opts.sandbox {
            self.attach_read_only(&config, &backend, n_workers)?
        } else {
            EmbeddingStore::open_with(
                config.clone(),
                &backend,
                self.opts.shard_id,
                n_workers,
                &self.opts.storage,
            )?
        };
        let mut tables = self.tables.write().unwrap();
        // A concurrent create may have won; keep the first store.
        tables.entry(config.name.clone()).or_insert(Table {
            store: Arc::new(store),
            n_workers,
        });
        Ok(Response::Created)
    }

    /// Sandbox servers may attach to tables that already have persisted
    /// state, but never create storage.
    fn attach_read_only(
        &self,
        config: &TableConfig,
        backend: &StorageBackend,
        n_workers: u32,
    ) -> Result<EmbeddingStore> {
        match backend {
            StorageBackend::InMemory => Err(Error::SandboxViolation(format!("create table `{}`", config.name))),
            StorageBackend::FileSnapshot { path } => {
                let dir = self.opts.storage.resolve(path)?;
                let records = FileBackend::load_read_only(
                    &dir,
                    &config.name,
                    self.opts.shard_id,
                    config.digest(),
                    config.stored_dim(),
                )?
                .ok_or_else(|| Error::SandboxViolation(format!("create table `{}`", config.name)))?;
                EmbeddingStore::with_backend(config.clone(), Box::new(MemoryBackend::from_records(records)))
            }
            // Reads only; lookups never create in sandbox mode, so nothing is written back.
            StorageBackend::CachedRemote { .. } => EmbeddingStore::open_with(
                config.clone(),
                backend,
                self.opts.shard_id,
                n_workers,
                &self.opts.storage,
            ),
        }
    }

    fn stats(&self) -> Result<Response> {
        let tables = self.tables.read().unwrap();
        let mut names: Vec<&String> = tables.keys().collect();
        names.sort();
        let mut out = Vec::with_capacity(names.len());
        for name in names {
            let s = &tables[name].store;
            out.push(TableStats {
                name: name.clone(),
                config_digest: s.digest(),
                resident: s.len()? as u64,
                content_digest: s.content_digest()?,
            });
        }
        Ok(Response::Stats(out))
    }
}

impl Handler for Worker {
    fn handle(&self, req: Request) -> Result<Response> {
        if self.opts.sandbox && req.is_mutation() && !matches!(req, Request::CreateTable { .. }) {
            return Err(Error::SandboxViolation(request_name(&req).into()));
        }
        match req {
            Request::Ping { version } => {
                if version != PROTOCOL_VERSION {
                    return Err(Error::Protocol(format!(
                        "client speaks protocol {version}, this worker speaks {PROTOCOL_VERSION}"
                    )));
                }
                Ok(Response::Pong {
                    version: PROTOCOL_VERSION,
                    role: Role::Worker,
                    shard_id: self.opts.shard_id,
                    n_workers: 0,
                    sandbox: self.opts.sandbox,
                })
            }
            Request::CreateTable { config, n_workers } => self.create_table(config, n_workers),
            Request::Lookup {
                table,
                keys,
                create_if_missing,
            } => {
                let create = create_if_missing && !self.opts.sandbox;
                Ok(Response::Entries(self.store(&table)?.lookup(&keys, create)?))
            }
            Request::Update {
                table,
                mode,
                pairs,
                learning_rate,
                global_step,
                update_frequency,
            } => {
                let store = self.store(&table)?;
                let n = match mode {
                    UpdateMode::Gradient => {
                        store.apply_gradients(pairs, learning_rate, global_step, update_frequency)?
                    }
                    UpdateMode::Assign => store.assign_vectors(pairs, global_step, update_frequency)?,
                };
                Ok(Response::Updated(n as u64))
            }
            Request::SampleShard {
                table,
                positives,
                count,
                seed,
                range,
            } => {
                let store = self.store(&table)?;
                let index = store.sampling_index()?;
                Ok(Response::ShardSample(shard_sample(
                    &index,
                    &positives,
                    count as usize,
                    seed,
                    store.config().sampler,
                    range as usize,
                )))
            }
            Request::TopK { table, activation, k } => {
                let store = self.store(&table)?;
                let cfg = store.config();
                if activation.len() != cfg.embedding_dim as usize {
                    return Err(Error::DimensionMismatch {
                        expected: cfg.embedding_dim as usize,
                        got: activation.len(),
                    });
                }
                let entries = store.scan()?;
                let list = worker_top_k(
                    entries.iter().map(|(k, e)| (k, e.vector.as_slice())),
                    &activation,
                    k as usize,
                    cfg.has_bias,
                )?;
                Ok(Response::TopK(list))
            }
            Request::ExportShard { table, path } => {
                let store = self.store(&table)?;
                let n = store.export_to_file(Path::new(&path))?;
                if !self.opts.sandbox {
                    store.seal()?;
                }
                Ok(Response::Exported(n))
            }
            Request::ImportShard { table, paths } => {
                let store = self.store(&table)?;
                let n_workers = self.n_workers(&table)?;
                let mut total = 0;
                for p in paths {
                    total += store.import_file_for_shard(Path::new(&p), self.opts.shard_id, n_workers)?;
                }
                Ok(Response::Imported(total))
            }
            Request::Stats => self.stats(),
            other => Err(Error::InvalidArgument(format!(
                "`{}` must be sent to the master",
                request_name(&other)
            ))),
        }
    }
}

pub fn request_name(req: &Request) -> &'static str {
    match req {
        Request::Ping { .. } => "ping",
        Request::CreateTable { .. } => "create_table",
        Request::Lookup { .. } => "lookup",
        Request::Update { .. } => "update",
        Request::Sample { .. } => "sample",
        Request::SampledLogits { .. } => "sampled_logits",
        Request::TopK { .. } => "top_k",
        Request::Save { .. } => "save",
        Request::Restore { .. } => "restore",
        Request::Stats => "stats",
        Request::SampleShard { .. } => "sample_shard",
        Request::ExportShard { .. } => "export_shard",
        Request::ImportShard { .. } => "import_shard",
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Initializer;
    use crate::key::keys;

    fn cfg() -> TableConfig {
        TableConfig::new("t", 2).with_initializer(Initializer::Zeros)
    }

    #[test]
    fn backend_flag_parsing() {
        assert_eq!("memory".parse::<BackendOverride>().unwrap(), BackendOverride::Memory);
        assert_eq!(
            "file:/tmp/x".parse::<BackendOverride>().unwrap(),
            BackendOverride::File("/tmp/x".into())
        );
        assert_eq!(
            "remote:kv".parse::<BackendOverride>().unwrap(),
            BackendOverride::Remote("kv".into())
        );
        assert!("file:".parse::<BackendOverride>().is_err());
    }

    #[test]
    fn conflicting_create_is_rejected() {
        let w = Worker::new(WorkerOptions::default());
        w.handle(Request::CreateTable {
            config: cfg(),
            n_workers: 1,
        })
        .unwrap();
        w.handle(Request::CreateTable {
            config: cfg(),
            n_workers: 1,
        })
        .unwrap();
        let other = cfg().with_seed(99);
        assert!(matches!(
            w.handle(Request::CreateTable {
                config: other,
                n_workers: 1
            }),
            Err(Error::InvalidConfig { .. })
        ));
    }

    #[test]
    fn sandbox_rejects_mutations_and_never_creates() {
        let w = Worker::new(WorkerOptions {
            sandbox: true,
            ..Default::default()
        });
        assert!(matches!(
            w.handle(Request::CreateTable {
                config: cfg(),
                n_workers: 1
            }),
            Err(Error::SandboxViolation(_))
        ));
        assert!(matches!(
            w.handle(Request::Update {
                table: "t".into(),
                mode: UpdateMode::Gradient,
                pairs: vec![(keys(["a"])[0].clone(), vec![1.0, 1.0])],
                learning_rate: 0.1,
                global_step: 0,
                update_frequency: true,
            }),
            Err(Error::SandboxViolation(_))
        ));
    }

    #[test]
    fn master_only_requests_are_refused() {
        let w = Worker::new(WorkerOptions::default());
        assert!(matches!(
            w.handle(Request::Restore { path: "x".into() }),
            Err(Error::InvalidArgument(_))
        ));
    }
}
