//! Client SDK: table handles with tensor-shaped lookups and gradient
//! write-back, plus the skip-gram training harness built on top of them.

pub mod corpus;
pub mod skipgram;

use std::path::Path;
use std::sync::{Arc, Mutex};

use indexmap::IndexMap;

use crate::config::{TableConfig, TableId};
use crate::entry::EmbeddingEntry;
use crate::error::{Error, Result};
use crate::key::EmbeddingKey;
use crate::retrieval::ScoredKey;
use crate::sampler::{SampledLogits, SampledResult};
use crate::service::protocol::TableStats;
use crate::service::{CheckpointManifest, Handler, RemoteHandler, Request, Response, UpdateMode};

/// Keys arranged in a dense row-major shape.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyTensor {
    pub shape: Vec<usize>,
    pub keys: Vec<EmbeddingKey>,
}

impl KeyTensor {
    pub fn new(shape: Vec<usize>, keys: Vec<EmbeddingKey>) -> Result<Self> {
        if shape.iter().product::<usize>() != keys.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} does not hold {} keys",
                keys.len()
            )));
        }
        Ok(Self { shape, keys })
    }

    pub fn vector(keys: Vec<EmbeddingKey>) -> Self {
        Self {
            shape: vec![keys.len()],
            keys,
        }
    }
}

/// Dense row-major float tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} does not hold {} values",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    /// The `i`-th row of the last axis.
    pub fn row(&self, i: usize) -> &[f32] {
        let w = *self.shape.last().unwrap_or(&1);
        &self.data[i * w..(i + 1) * w]
    }
}

/// Connection to a master plus the registry of tables this client created.
///
/// The registry holds table identities only; embedding data always stays
/// on the workers.
pub struct DynEmbedClient {
    conn: Arc<dyn Handler>,
    registry: Mutex<IndexMap<String, TableConfig>>,
}

impl DynEmbedClient {
    pub fn connect(master_addr: &str) -> Result<Self> {
        let client = Self::with_handler(Arc::new(RemoteHandler::master(master_addr)));
        client.conn.handle(Request::Ping {
            version: crate::service::protocol::PROTOCOL_VERSION,
        })?;
        Ok(client)
    }

    /// Talks to any handler, typically an in-process master.
    pub fn with_handler(conn: Arc<dyn Handler>) -> Self {
        Self {
            conn,
            registry: Mutex::new(IndexMap::new()),
        }
    }

    /// Creates (or attaches to) a table and records it in the registry.
    pub fn table(&self, config: TableConfig) -> Result<TableHandle> {
        config.validate()?;
        self.conn.handle(Request::CreateTable {
            config: config.clone(),
            n_workers: 0,
        })?;
        self.registry
            .lock()
            .unwrap()
            .insert(config.name.clone(), config.clone());
        Ok(TableHandle {
            id: config.table_id(),
            config,
            conn: self.conn.clone(),
        })
    }

    pub fn registry(&self) -> Vec<TableId> {
        self.registry
            .lock()
            .unwrap()
            .values()
            .map(TableConfig::table_id)
            .collect()
    }

    /// Checkpoints every table in the registry.
    pub fn save(&self, path: &Path, global_step: u64) -> Result<CheckpointManifest> {
        let tables = self.registry.lock().unwrap().keys().cloned().collect();
        match self.conn.handle(Request::Save {
            path: path.to_string_lossy().into_owned(),
            tables,
            global_step,
        })? {
            Response::Saved(m) => Ok(m),
            other => Err(unexpected(other)),
        }
    }

    /// Restores a checkpoint and registers its tables.
    pub fn restore(&self, path: &Path) -> Result<CheckpointManifest> {
        match self.conn.handle(Request::Restore {
            path: path.to_string_lossy().into_owned(),
        })? {
            Response::Restored { .. } => {}
            other => return Err(unexpected(other)),
        }
        let manifest = CheckpointManifest::read(path)?;
        let mut reg = self.registry.lock().unwrap();
        for t in &manifest.tables {
            reg.insert(t.name.clone(), t.config.clone());
        }
        Ok(manifest)
    }

    pub fn stats(&self) -> Result<Vec<TableStats>> {
        match self.conn.handle(Request::Stats)? {
            Response::Stats(s) => Ok(s),
            other => Err(unexpected(other)),
        }
    }
}

fn unexpected(resp: Response) -> Error {
    Error::Protocol(format!("unexpected reply type {:#06x}", resp.request_type()))
}

/// A table as seen by a client. Cheap to clone and share across threads.
#[derive(Clone)]
pub struct TableHandle {
    id: TableId,
    config: TableConfig,
    conn: Arc<dyn Handler>,
}

impl std::fmt::Debug for TableHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "TableHandle({})", self.id)
    }
}

impl TableHandle {
    pub fn id(&self) -> &TableId {
        &self.id
    }

    pub fn config(&self) -> &TableConfig {
        &self.config
    }

    pub fn name(&self) -> &str {
        &self.config.name
    }

    pub fn embedding_dim(&self) -> usize {
        self.config.embedding_dim as usize
    }

    /// Full entries, one per key; `None` for keys that do not exist.
    pub fn lookup_entries(
        &self,
        keys: &[EmbeddingKey],
        create_if_missing: bool,
    ) -> Result<Vec<Option<EmbeddingEntry>>> {
        match self.conn.handle(Request::Lookup {
            table: self.config.name.clone(),
            keys: keys.to_vec(),
            create_if_missing,
        })? {
            Response::Entries(e) => Ok(e),
            other => Err(unexpected(other)),
        }
    }

    /// Embeddings with shape `keys.shape + [embedding_dim]`. During training
    /// unknown keys are created; otherwise they come back as zero rows.
    /// The bias slot of output tables is not part of the result.
    pub fn lookup(&self, keys: &KeyTensor, training: bool) -> Result<Tensor> {
        let dim = self.embedding_dim();
        let entries = self.lookup_entries(&keys.keys, training)?;
        let mut data = Vec::with_capacity(keys.keys.len() * dim);
        for e in entries {
            match e {
                Some(e) => data.extend_from_slice(&e.vector[..dim]),
                None => data.extend(std::iter::repeat_n(0.0, dim)),
            }
        }
        let mut shape = keys.shape.clone();
        shape.push(dim);
        Tensor::new(shape, data)
    }

    /// Sends `∂L/∂output` for a previous [`TableHandle::lookup`]; the server
    /// aggregates duplicates and applies the table optimizer.
    pub fn lookup_backward(
        &self,
        keys: &KeyTensor,
        grads: &Tensor,
        learning_rate: f32,
        global_step: u64,
    ) -> Result<u64> {
        let dim = self.embedding_dim();
        let mut want = keys.shape.clone();
        want.push(dim);
        if grads.shape != want {
            return Err(Error::ShapeMismatch(format!(
                "gradient shape {:?}, expected {want:?}",
                grads.shape
            )));
        }
        let pad = self.config.has_bias as usize;
        let pairs = keys
            .keys
            .iter()
            .enumerate()
            .map(|(i, k)| {
                let mut g = grads.row(i).to_vec();
                g.extend(std::iter::repeat_n(0.0, pad));
                (k.clone(), g)
            })
            .collect();
        self.apply_gradients(pairs, learning_rate, global_step, true)
    }

    /// Gradients over stored vectors (bias slot included).
    pub fn apply_gradients(
        &self,
        pairs: Vec<(EmbeddingKey, Vec<f32>)>,
        learning_rate: f32,
        global_step: u64,
        update_frequency: bool,
    ) -> Result<u64> {
        self.update(
            UpdateMode::Gradient,
            pairs,
            learning_rate,
            global_step,
            update_frequency,
        )
    }

    /// Overwrites stored vectors.
    pub fn assign(&self, pairs: Vec<(EmbeddingKey, Vec<f32>)>, global_step: u64) -> Result<u64> {
        self.update(UpdateMode::Assign, pairs, 0.0, global_step, false)
    }

    fn update(
        &self,
        mode: UpdateMode,
        pairs: Vec<(EmbeddingKey, Vec<f32>)>,
        learning_rate: f32,
        global_step: u64,
        update_frequency: bool,
    ) -> Result<u64> {
        match self.conn.handle(Request::Update {
            table: self.config.name.clone(),
            mode,
            pairs,
            learning_rate,
            global_step,
            update_frequency,
        })? {
            Response::Updated(n) => Ok(n),
            other => Err(unexpected(other)),
        }
    }

    pub fn sample(
        &self,
        positives: &[EmbeddingKey],
        num_sampled: u32,
        seed: u64,
        range: u32,
    ) -> Result<Vec<SampledResult>> {
        match self.conn.handle(Request::Sample {
            table: self.config.name.clone(),
            positives: positives.to_vec(),
            num_sampled,
            seed,
            range,
        })? {
            Response::Sampled(s) => Ok(s),
            other => Err(unexpected(other)),
        }
    }

    /// One shared candidate set for all rows; see [`crate::sampler::sampled_logits`].
    pub fn sampled_logits(
        &self,
        activations: Vec<Vec<f32>>,
        positives: Vec<Vec<EmbeddingKey>>,
        num_sampled: u32,
        seed: u64,
    ) -> Result<SampledLogits> {
        match self.conn.handle(Request::SampledLogits {
            table: self.config.name.clone(),
            activations,
            positives,
            num_sampled,
            seed,
        })? {
            Response::Logits(l) => Ok(l),
            other => Err(unexpected(other)),
        }
    }

    pub fn top_k(&self, activation: &[f32], k: u32) -> Result<Vec<ScoredKey>> {
        match self.conn.handle(Request::TopK {
            table: self.config.name.clone(),
            activation: activation.to_vec(),
            k,
        })? {
            Response::TopK(l) => Ok(l),
            other => Err(unexpected(other)),
        }
    }
}
