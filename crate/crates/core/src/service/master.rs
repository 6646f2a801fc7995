//! The master routes requests to workers and merges their replies.
//!
//! It keeps only the worker list and the table registry; all embedding
//! state lives in the workers.

use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use indexmap::IndexMap;
use xxhash_rust::xxh64::Xxh64;

use super::checkpoint::{snapshot_file_name, CheckpointManifest, TableCheckpoint, MANIFEST_VERSION};
use super::protocol::{Request, Response, Role, TableStats, PROTOCOL_VERSION};
use super::shard_map::partition;
use super::Handler;
use crate::config::TableConfig;
use crate::entry::EmbeddingEntry;
use crate::error::{Error, Result};
use crate::key::EmbeddingKey;
use crate::retrieval::merge_top_k;
use crate::sampler::{distinct, merge_shard_samples, sampled_logits, SampledResult};

pub struct Master {
    workers: Vec<Arc<dyn Handler>>,
    tables: RwLock<IndexMap<String, TableConfig>>,
}

impl Master {
    pub fn new(workers: Vec<Arc<dyn Handler>>) -> Self {
        assert!(!workers.is_empty(), "a master needs at least one worker");
        Self {
            workers,
            tables: RwLock::new(IndexMap::new()),
        }
    }

    pub fn n_workers(&self) -> u32 {
        self.workers.len() as u32
    }

    pub fn table_config(&self, name: &str) -> Result<TableConfig> {
        self.tables
            .read()
            .unwrap()
            .get(name)
            .cloned()
            .ok_or_else(|| Error::UnknownTable(name.to_string()))
    }

    pub fn table_names(&self) -> Vec<String> {
        self.tables.read().unwrap().keys().cloned().collect()
    }

    /// Sends a request to one worker. A worker that restarted and lost its
    /// table registry gets the table re-created, then the request is retried.
    fn call(&self, shard: usize, req: Request) -> Result<Response> {
        let table = match &req {
            Request::Lookup { table, .. }
            | Request::Update { table, .. }
            | Request::SampleShard { table, .. }
            | Request::TopK { table, .. }
            | Request::ExportShard { table, .. }
            | Request::ImportShard { table, .. } => Some(table.clone()),
            _ => None,
        };
        match self.workers[shard].handle(req.clone()) {
            Err(Error::UnknownTable(_)) if table.is_some() => {
                let config = self.table_config(table.as_deref().unwrap())?;
                log::info!("re-creating table `{}` on worker {shard}", config.name);
                self.workers[shard].handle(Request::CreateTable {
                    config,
                    n_workers: self.n_workers(),
                })?;
                self.workers[shard].handle(req)
            }
            other => other,
        }
    }

    /// Runs per-shard requests concurrently; results come back in input order.
    fn fan_out(&self, reqs: Vec<(usize, Request)>) -> Vec<(usize, Result<Response>)> {
        if reqs.len() <= 1 {
            return reqs.into_iter().map(|(s, r)| (s, self.call(s, r))).collect();
        }
        std::thread::scope(|scope| {
            let handles: Vec<_> = reqs
                .into_iter()
                .map(|(s, r)| (s, scope.spawn(move || self.call(s, r))))
                .collect();
            handles
                .into_iter()
                .map(|(s, h)| (s, h.join().expect("worker call panicked")))
                .collect()
        })
    }

    fn all_ok(results: Vec<(usize, Result<Response>)>) -> Result<Vec<(usize, Response)>> {
        results.into_iter().map(|(s, r)| r.map(|r| (s, r))).collect()
    }

    fn create_table(&self, config: TableConfig) -> Result<Response> {
        config.validate()?;
        if let Some(existing) = self.tables.read().unwrap().get(&config.name) {
            if existing.digest() != config.digest() {
                return Err(Error::invalid_config(
                    "name",
                    format!("table `{}` already exists with a different config", config.name),
                ));
            }
        }
        let n = self.n_workers();
        let reqs = (0..self.workers.len())
            .map(|s| {
                (
                    s,
                    Request::CreateTable {
                        config: config.clone(),
                        n_workers: n,
                    },
                )
            })
            .collect();
        Self::all_ok(self.fan_out(reqs))?;
        self.tables.write().unwrap().insert(config.name.clone(), config);
        Ok(Response::Created)
    }

    /// Looks up `keys`, optionally creating missing ones.
    ///
    /// Creation happens in a second round that only starts once every shard
    /// answered the read, so a lookup that fails on an unreachable shard
    /// leaves no new keys behind on the others.
    pub fn lookup(&self, table: &str, keys: &[EmbeddingKey], create: bool) -> Result<Vec<Option<EmbeddingEntry>>> {
        self.table_config(table)?;
        let mut out = self.lookup_round(table, keys, false)?;
        if !create {
            return Ok(out);
        }
        let missing: Vec<usize> = (0..keys.len()).filter(|&i| out[i].is_none()).collect();
        if missing.is_empty() {
            return Ok(out);
        }
        let missing_keys: Vec<EmbeddingKey> = missing.iter().map(|&i| keys[i].clone()).collect();
        for (i, e) in missing.into_iter().zip(self.lookup_round(table, &missing_keys, true)?) {
            out[i] = e;
        }
        Ok(out)
    }

    fn lookup_round(&self, table: &str, keys: &[EmbeddingKey], create: bool) -> Result<Vec<Option<EmbeddingEntry>>> {
        let parts = partition(keys, self.n_workers());
        let reqs = parts
            .iter()
            .enumerate()
            .filter(|(_, p)| !p.is_empty())
            .map(|(s, p)| {
                (
                    s,
                    Request::Lookup {
                        table: table.to_string(),
                        keys: p.iter().map(|&i| keys[i].clone()).collect(),
                        create_if_missing: create,
                    },
                )
            })
            .collect();
        let mut out = vec![None; keys.len()];
        for (s, resp) in Self::all_ok(self.fan_out(reqs))? {
            let Response::Entries(entries) = resp else {
                return Err(unexpected(&resp));
            };
            if entries.len() != parts[s].len() {
                return Err(Error::Protocol(format!(
                    "worker {s} returned {} entries",
                    entries.len()
                )));
            }
            for (&i, e) in parts[s].iter().zip(entries) {
                out[i] = e;
            }
        }
        Ok(out)
    }

    fn update(&self, req: Request) -> Result<Response> {
        let Request::Update {
            table,
            mode,
            pairs,
            learning_rate,
            global_step,
            update_frequency,
        } = req
        else {
            unreachable!()
        };
        self.table_config(&table)?;
        let keys: Vec<EmbeddingKey> = pairs.iter().map(|(k, _)| k.clone()).collect();
        let parts = partition(&keys, self.n_workers());
        let mut pairs: Vec<Option<(EmbeddingKey, Vec<f32>)>> = pairs.into_iter().map(Some).collect();
        let reqs = parts
            .iter()
            .enumerate()
            .filter(|(_, p)| !p.is_empty())
            .map(|(s, p)| {
                (
                    s,
                    Request::Update {
                        table: table.clone(),
                        mode,
                        pairs: p.iter().map(|&i| pairs[i].take().unwrap()).collect(),
                        learning_rate,
                        global_step,
                        update_frequency,
                    },
                )
            })
            .collect();
        let mut total = 0;
        // Every shard's result is inspected so a failure on one does not hide
        // that others applied their part.
        let mut first_err = None;
        for (_, r) in self.fan_out(reqs) {
            match r {
                Ok(Response::Updated(n)) => total += n,
                Ok(other) => return Err(unexpected(&other)),
                Err(e) => {
                    first_err.get_or_insert(e);
                }
            }
        }
        match first_err {
            Some(e) => Err(e),
            None => Ok(Response::Updated(total)),
        }
    }

    pub fn sample(
        &self,
        table: &str,
        positives: &[EmbeddingKey],
        num_sampled: u32,
        seed: u64,
        range: u32,
    ) -> Result<Vec<SampledResult>> {
        let config = self.table_config(table)?;
        let positives = distinct(positives);
        let reqs = (0..self.workers.len())
            .map(|s| {
                (
                    s,
                    Request::SampleShard {
                        table: table.to_string(),
                        positives: positives.clone(),
                        count: num_sampled,
                        seed,
                        range,
                    },
                )
            })
            .collect();
        let mut shards = Vec::with_capacity(self.workers.len());
        for (_, resp) in Self::all_ok(self.fan_out(reqs))? {
            match resp {
                Response::ShardSample(s) => shards.push(s),
                other => return Err(unexpected(&other)),
            }
        }
        merge_shard_samples(&positives, &shards, num_sampled as usize, config.sampler)
    }

    fn sampled_logits(
        &self,
        table: &str,
        activations: Vec<Vec<f32>>,
        positives: Vec<Vec<EmbeddingKey>>,
        num_sampled: u32,
        seed: u64,
    ) -> Result<Response> {
        let config = self.table_config(table)?;
        let all: Vec<EmbeddingKey> = positives.iter().flatten().cloned().collect();
        let results = self.sample(table, &all, num_sampled, seed, 0)?;
        let ids: Vec<EmbeddingKey> = results.iter().map(|r| r.id.clone()).collect();
        let vectors = self
            .lookup(table, &ids, true)?
            .into_iter()
            .zip(&ids)
            .map(|(e, k)| {
                e.map(|e| e.vector)
                    .ok_or_else(|| Error::Protocol(format!("no entry for {k}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Response::Logits(sampled_logits(
            &activations,
            &positives,
            results,
            vectors,
            num_sampled as usize,
            config.embedding_dim as usize,
            config.has_bias,
        )?))
    }

    fn top_k(&self, table: &str, activation: Vec<f32>, k: u32) -> Result<Response> {
        self.table_config(table)?;
        let reqs = (0..self.workers.len())
            .map(|s| {
                (
                    s,
                    Request::TopK {
                        table: table.to_string(),
                        activation: activation.clone(),
                        k,
                    },
                )
            })
            .collect();
        let mut lists = Vec::with_capacity(self.workers.len());
        for (_, resp) in Self::all_ok(self.fan_out(reqs))? {
            match resp {
                Response::TopK(l) => lists.push(l),
                other => return Err(unexpected(&other)),
            }
        }
        Ok(Response::TopK(merge_top_k(&lists, k as usize)))
    }

    fn save(&self, path: &str, tables: Vec<String>, global_step: u64) -> Result<Response> {
        let dir = absolute(Path::new(path))?;
        std::fs::create_dir_all(&dir).map_err(|e| Error::SinkWriteFailure(format!("{}: {e}", dir.display())))?;
        let names = if tables.is_empty() { self.table_names() } else { tables };
        let mut entries = Vec::with_capacity(names.len());
        for name in names {
            let config = self.table_config(&name)?;
            let files: Vec<String> = (0..self.n_workers()).map(|s| snapshot_file_name(&name, s)).collect();
            let reqs = files
                .iter()
                .enumerate()
                .map(|(s, f)| {
                    (
                        s,
                        Request::ExportShard {
                            table: name.clone(),
                            path: dir.join(f).to_string_lossy().into_owned(),
                        },
                    )
                })
                .collect();
            let mut counts = vec![0; files.len()];
            for (s, resp) in Self::all_ok(self.fan_out(reqs))? {
                match resp {
                    Response::Exported(n) => counts[s] = n,
                    other => return Err(unexpected(&other)),
                }
            }
            entries.push(TableCheckpoint {
                name,
                config_digest: config.digest(),
                stored_dim: config.stored_dim() as u32,
                config,
                files,
                counts,
            });
        }
        let manifest = CheckpointManifest {
            version: MANIFEST_VERSION.into(),
            created_at_step: global_step,
            n_workers: self.n_workers(),
            tables: entries,
        };
        manifest.write(&dir)?;
        Ok(Response::Saved(manifest))
    }

    fn restore(&self, path: &str) -> Result<Response> {
        let dir = absolute(Path::new(path))?;
        let manifest = CheckpointManifest::read(&dir)?;
        manifest.verify(&dir)?;
        let mut records = 0;
        for t in &manifest.tables {
            self.create_table(t.config.clone())?;
            let paths: Vec<String> = t
                .files
                .iter()
                .map(|f| dir.join(f).to_string_lossy().into_owned())
                .collect();
            let reqs = (0..self.workers.len())
                .map(|s| {
                    (
                        s,
                        Request::ImportShard {
                            table: t.name.clone(),
                            paths: paths.clone(),
                        },
                    )
                })
                .collect();
            for (_, resp) in Self::all_ok(self.fan_out(reqs))? {
                match resp {
                    Response::Imported(n) => records += n,
                    other => return Err(unexpected(&other)),
                }
            }
        }
        Ok(Response::Restored {
            tables: manifest.tables.len() as u32,
            records,
        })
    }

    /// Per-table totals over all workers. The content digest combines the
    /// per-shard digests in shard order.
    fn stats(&self) -> Result<Response> {
        let reqs = (0..self.workers.len()).map(|s| (s, Request::Stats)).collect();
        let mut merged: IndexMap<String, (u64, u64, Xxh64)> = IndexMap::new();
        for (_, resp) in Self::all_ok(self.fan_out(reqs))? {
            let Response::Stats(list) = resp else {
                return Err(unexpected(&resp));
            };
            for s in list {
                let e = merged
                    .entry(s.name.clone())
                    .or_insert_with(|| (s.config_digest, 0, Xxh64::new(0)));
                e.1 += s.resident;
                e.2.update(&s.content_digest.to_le_bytes());
            }
        }
        Ok(Response::Stats(
            merged
                .into_iter()
                .map(|(name, (config_digest, resident, h))| TableStats {
                    name,
                    config_digest,
                    resident,
                    content_digest: h.digest(),
                })
                .collect(),
        ))
    }
}

fn absolute(p: &Path) -> Result<PathBuf> {
    if p.is_absolute() {
        Ok(p.to_path_buf())
    } else {
        Ok(std::env::current_dir()?.join(p))
    }
}

fn unexpected(resp: &Response) -> Error {
    Error::Protocol(format!("unexpected worker reply {:?}", resp.request_type()))
}

impl Handler for Master {
    fn handle(&self, req: Request) -> Result<Response> {
        match req {
            Request::Ping { version } => {
                if version != PROTOCOL_VERSION {
                    return Err(Error::Protocol(format!(
                        "client speaks protocol {version}, this master speaks {PROTOCOL_VERSION}"
                    )));
                }
                Ok(Response::Pong {
                    version: PROTOCOL_VERSION,
                    role: Role::Master,
                    shard_id: 0,
                    n_workers: self.n_workers(),
                    sandbox: false,
                })
            }
            Request::CreateTable { config, .. } => self.create_table(config),
            Request::Lookup {
                table,
                keys,
                create_if_missing,
            } => Ok(Response::Entries(self.lookup(&table, &keys, create_if_missing)?)),
            req @ Request::Update { .. } => self.update(req),
            Request::Sample {
                table,
                positives,
                num_sampled,
                seed,
                range,
            } => Ok(Response::Sampled(self.sample(
                &table,
                &positives,
                num_sampled,
                seed,
                range,
            )?)),
            Request::SampledLogits {
                table,
                activations,
                positives,
                num_sampled,
                seed,
            } => self.sampled_logits(&table, activations, positives, num_sampled, seed),
            Request::TopK { table, activation, k } => self.top_k(&table, activation, k),
            Request::Save {
                path,
                tables,
                global_step,
            } => self.save(&path, tables, global_step),
            Request::Restore { path } => self.restore(&path),
            Request::Stats => self.stats(),
            other => Err(Error::InvalidArgument(format!(
                "`{}` is a worker-internal request",
                super::worker::request_name(&other)
            ))),
        }
    }
}
