//! Skip-gram (word2vec) training with sampled softmax.
//!
//! The same step function runs against two backends:
//!
//! * [`ServiceBackend`] goes through a master, so tables live on workers.
//! * [`ReferenceBackend`] keeps both tables in in-process stores and calls
//!   the sampler functions directly.
//!
//! With one worker and one client thread the two perform identical float
//! operations in identical order, so their traces match bit for bit.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xxhash_rust::xxh64::xxh64;

use super::corpus::{skipgram_pairs, tokenize, Vocabulary, OOV};
use super::{DynEmbedClient, TableHandle};
use crate::config::{Initializer, OptimizerSpec, SamplerStrategy, TableConfig};
use crate::entry::EmbeddingEntry;
use crate::error::{Error, Result};
use crate::key::EmbeddingKey;
use crate::retrieval::ScoredKey;
use crate::sampler::{sample, sampled_logits, softmax_cross_entropy, SampledLogits};
use crate::store::EmbeddingStore;

pub const INPUT_TABLE: &str = "emb_in";
pub const OUTPUT_TABLE: &str = "emb_out";

#[derive(Debug, Clone)]
pub struct SkipGramConfig {
    pub window: usize,
    pub dim: u32,
    pub num_sampled: u32,
    pub optimizer: OptimizerSpec,
    pub steps: u64,
    pub batch: usize,
    pub seed: u64,
    /// Keep only the `cutoff` most frequent tokens; the rest become `oov`.
    pub cutoff: Option<usize>,
    pub sampler: SamplerStrategy,
}

impl Default for SkipGramConfig {
    fn default() -> Self {
        Self {
            window: 1,
            dim: 32,
            num_sampled: 16,
            optimizer: OptimizerSpec::sgd(5.0),
            steps: 5000,
            batch: 64,
            seed: 7,
            cutoff: None,
            sampler: SamplerStrategy::FrequencyPower { power: 0.75 },
        }
    }
}

impl SkipGramConfig {
    pub fn input_table(&self) -> TableConfig {
        TableConfig::new(INPUT_TABLE, self.dim)
            .with_seed(self.seed)
            .with_optimizer(self.optimizer)
            .with_sampler(self.sampler)
            .with_env_seed()
    }

    pub fn output_table(&self) -> TableConfig {
        TableConfig::new(OUTPUT_TABLE, self.dim)
            .with_bias(true)
            .with_initializer(Initializer::Zeros)
            .with_seed(self.seed)
            .with_optimizer(self.optimizer)
            .with_sampler(self.sampler)
            .with_env_seed()
    }
}

/// Training pairs after the dictionary cutoff, plus the vocabulary they came from.
#[derive(Debug, Clone)]
pub struct SkipGramData {
    pub pairs: Vec<(EmbeddingKey, EmbeddingKey)>,
    pub vocab: Vocabulary,
}

impl SkipGramData {
    pub fn from_text(text: &str, window: usize, cutoff: Option<usize>) -> Result<Self> {
        let lines = tokenize(text);
        let vocab = Vocabulary::from_lines(&lines);
        let pairs: Vec<_> = skipgram_pairs(&lines, window)
            .into_iter()
            .map(|(c, x)| {
                Ok((
                    EmbeddingKey::try_from(vocab.map(&c, cutoff))?,
                    EmbeddingKey::try_from(vocab.map(&x, cutoff))?,
                ))
            })
            .collect::<Result<_>>()?;
        if pairs.is_empty() {
            return Err(Error::InvalidArgument("corpus yields no training pairs".into()));
        }
        Ok(Self { pairs, vocab })
    }

    /// Distinct keys that appear in the training pairs, in first-seen order.
    pub fn keys(&self) -> Vec<EmbeddingKey> {
        let set: indexmap::IndexSet<&EmbeddingKey> = self.pairs.iter().flat_map(|(a, b)| [a, b]).collect();
        set.into_iter().cloned().collect()
    }
}

/// What the trainer needs from wherever the tables live.
pub trait TrainingBackend: Sync {
    /// Stored vectors, creating missing keys.
    fn lookup(&self, table: &str, keys: &[EmbeddingKey]) -> Result<Vec<Vec<f32>>>;
    fn lookup_entries(&self, table: &str, keys: &[EmbeddingKey]) -> Result<Vec<Option<EmbeddingEntry>>>;
    fn sampled_logits(
        &self,
        table: &str,
        activations: Vec<Vec<f32>>,
        positives: Vec<Vec<EmbeddingKey>>,
        num_sampled: u32,
        seed: u64,
    ) -> Result<SampledLogits>;
    fn apply_gradients(
        &self,
        table: &str,
        pairs: Vec<(EmbeddingKey, Vec<f32>)>,
        lr: f32,
        global_step: u64,
        update_frequency: bool,
    ) -> Result<()>;
    fn top_k(&self, table: &str, activation: &[f32], k: u32) -> Result<Vec<ScoredKey>>;
}

pub struct ServiceBackend {
    tables: HashMap<String, TableHandle>,
}

impl ServiceBackend {
    pub fn new(client: &DynEmbedClient, cfg: &SkipGramConfig) -> Result<Self> {
        let mut tables = HashMap::new();
        for t in [cfg.input_table(), cfg.output_table()] {
            tables.insert(t.name.clone(), client.table(t)?);
        }
        Ok(Self { tables })
    }

    fn table(&self, name: &str) -> Result<&TableHandle> {
        self.tables.get(name).ok_or_else(|| Error::UnknownTable(name.into()))
    }
}

impl TrainingBackend for ServiceBackend {
    fn lookup(&self, table: &str, keys: &[EmbeddingKey]) -> Result<Vec<Vec<f32>>> {
        self.table(table)?
            .lookup_entries(keys, true)?
            .into_iter()
            .map(|e| {
                e.map(|e| e.vector)
                    .ok_or_else(|| Error::Protocol("lookup returned no entry".into()))
            })
            .collect()
    }

    fn lookup_entries(&self, table: &str, keys: &[EmbeddingKey]) -> Result<Vec<Option<EmbeddingEntry>>> {
        self.table(table)?.lookup_entries(keys, false)
    }

    fn sampled_logits(
        &self,
        table: &str,
        activations: Vec<Vec<f32>>,
        positives: Vec<Vec<EmbeddingKey>>,
        num_sampled: u32,
        seed: u64,
    ) -> Result<SampledLogits> {
        self.table(table)?
            .sampled_logits(activations, positives, num_sampled, seed)
    }

    fn apply_gradients(
        &self,
        table: &str,
        pairs: Vec<(EmbeddingKey, Vec<f32>)>,
        lr: f32,
        global_step: u64,
        update_frequency: bool,
    ) -> Result<()> {
        self.table(table)?
            .apply_gradients(pairs, lr, global_step, update_frequency)?;
        Ok(())
    }

    fn top_k(&self, table: &str, activation: &[f32], k: u32) -> Result<Vec<ScoredKey>> {
        self.table(table)?.top_k(activation, k)
    }
}

/// Both tables in single-shard in-memory stores inside the client process.
pub struct ReferenceBackend {
    tables: HashMap<String, EmbeddingStore>,
}

impl ReferenceBackend {
    pub fn new(cfg: &SkipGramConfig) -> Result<Self> {
        let mut tables = HashMap::new();
        for t in [cfg.input_table(), cfg.output_table()] {
            tables.insert(t.name.clone(), EmbeddingStore::in_memory(t)?);
        }
        Ok(Self { tables })
    }

    pub fn store(&self, name: &str) -> Result<&EmbeddingStore> {
        self.tables.get(name).ok_or_else(|| Error::UnknownTable(name.into()))
    }
}

impl TrainingBackend for ReferenceBackend {
    fn lookup(&self, table: &str, keys: &[EmbeddingKey]) -> Result<Vec<Vec<f32>>> {
        Ok(self
            .store(table)?
            .lookup(keys, true)?
            .into_iter()
            .map(|e| e.expect("created").vector)
            .collect())
    }

    fn lookup_entries(&self, table: &str, keys: &[EmbeddingKey]) -> Result<Vec<Option<EmbeddingEntry>>> {
        self.store(table)?.lookup(keys, false)
    }

    fn sampled_logits(
        &self,
        table: &str,
        activations: Vec<Vec<f32>>,
        positives: Vec<Vec<EmbeddingKey>>,
        num_sampled: u32,
        seed: u64,
    ) -> Result<SampledLogits> {
        let store = self.store(table)?;
        let cfg = store.config();
        let all: Vec<EmbeddingKey> = positives.iter().flatten().cloned().collect();
        let results = sample(
            &store.sampling_index()?,
            &all,
            num_sampled as usize,
            seed,
            cfg.sampler,
            0,
        )?;
        let ids: Vec<EmbeddingKey> = results.iter().map(|r| r.id.clone()).collect();
        let vectors = self.lookup(table, &ids)?;
        sampled_logits(
            &activations,
            &positives,
            results,
            vectors,
            num_sampled as usize,
            cfg.embedding_dim as usize,
            cfg.has_bias,
        )
    }

    fn apply_gradients(
        &self,
        table: &str,
        pairs: Vec<(EmbeddingKey, Vec<f32>)>,
        lr: f32,
        global_step: u64,
        update_frequency: bool,
    ) -> Result<()> {
        self.store(table)?
            .apply_gradients(pairs, lr, global_step, update_frequency)?;
        Ok(())
    }

    fn top_k(&self, table: &str, activation: &[f32], k: u32) -> Result<Vec<ScoredKey>> {
        let store = self.store(table)?;
        let entries = store.scan()?;
        crate::retrieval::worker_top_k(
            entries.iter().map(|(k, e)| (k, e.vector.as_slice())),
            activation,
            k as usize,
            store.config().has_bias,
        )
    }
}

/// Indices of the training pairs used at `step`.
pub fn batch_indices(n_pairs: usize, step: u64, batch: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(xxh64(&step.to_le_bytes(), seed));
    (0..batch).map(|_| rng.random_range(0..n_pairs)).collect()
}

/// Seed of the negative sample drawn at `step`.
pub fn sample_seed(seed: u64, step: u64) -> u64 {
    xxh64(&step.to_le_bytes(), seed ^ 0xA5A5_5A5A_0F0F_F0F0)
}

/// One synchronous training step; returns the mean loss over the batch.
pub fn train_step(backend: &dyn TrainingBackend, data: &SkipGramData, cfg: &SkipGramConfig, step: u64) -> Result<f64> {
    let idx = batch_indices(data.pairs.len(), step, cfg.batch, cfg.seed);
    let centers: Vec<EmbeddingKey> = idx.iter().map(|&i| data.pairs[i].0.clone()).collect();
    let positives: Vec<Vec<EmbeddingKey>> = idx.iter().map(|&i| vec![data.pairs[i].1.clone()]).collect();
    let acts = backend.lookup(INPUT_TABLE, &centers)?;
    let sl = backend.sampled_logits(
        OUTPUT_TABLE,
        acts.clone(),
        positives,
        cfg.num_sampled,
        sample_seed(cfg.seed, step),
    )?;

    let dim = cfg.dim as usize;
    let scale = 1.0 / idx.len() as f64;
    let mut grad_out = vec![vec![0.0f64; dim + 1]; sl.results.len()];
    let mut grad_in = vec![vec![0.0f64; dim]; idx.len()];
    let mut loss = 0.0;
    for (i, act) in acts.iter().enumerate() {
        let (l, g) = softmax_cross_entropy(&sl.logits[i], &sl.labels[i])?;
        loss += l;
        for (j, w) in sl.vectors.iter().enumerate() {
            let gij = g[j] as f64 * scale;
            for d in 0..dim {
                grad_out[j][d] += gij * act[d] as f64;
                grad_in[i][d] += gij * w[d] as f64;
            }
            grad_out[j][dim] += gij;
        }
    }

    let lr = cfg.optimizer.learning_rate;
    let global_step = step + 1;
    let to_f32 = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<f32>>();
    let mut pos_pairs = Vec::new();
    let mut neg_pairs = Vec::new();
    for (r, g) in sl.results.iter().zip(&grad_out) {
        let pair = (r.id.clone(), to_f32(g));
        if r.is_positive {
            pos_pairs.push(pair);
        } else {
            neg_pairs.push(pair);
        }
    }
    backend.apply_gradients(OUTPUT_TABLE, pos_pairs, lr, global_step, true)?;
    if !neg_pairs.is_empty() {
        // Negatives are not counted so frequency-based sampling does not feed on itself.
        backend.apply_gradients(OUTPUT_TABLE, neg_pairs, lr, global_step, false)?;
    }
    let in_pairs = centers.into_iter().zip(grad_in.iter().map(|g| to_f32(g))).collect();
    backend.apply_gradients(INPUT_TABLE, in_pairs, lr, global_step, true)?;
    Ok(loss * scale)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean batch loss, indexed by step.
    pub losses: Vec<f64>,
}

impl TrainReport {
    pub fn mean_loss(&self, steps: std::ops::Range<usize>) -> f64 {
        let s = &self.losses[steps];
        s.iter().sum::<f64>() / s.len() as f64
    }
}

/// Runs `cfg.steps` steps in order.
pub fn train_skipgram(backend: &dyn TrainingBackend, data: &SkipGramData, cfg: &SkipGramConfig) -> Result<TrainReport> {
    let mut losses = Vec::with_capacity(cfg.steps as usize);
    for step in 0..cfg.steps {
        losses.push(train_step(backend, data, cfg, step)?);
    }
    Ok(TrainReport { losses })
}

/// Runs the same steps from `threads` client threads that claim steps from
/// a shared counter, so updates interleave without any ordering.
pub fn train_skipgram_concurrent(
    backend: &dyn TrainingBackend,
    data: &SkipGramData,
    cfg: &SkipGramConfig,
    threads: usize,
) -> Result<TrainReport> {
    let next = AtomicU64::new(0);
    let losses = Mutex::new(vec![f64::NAN; cfg.steps as usize]);
    let first_err: Mutex<Option<Error>> = Mutex::new(None);
    std::thread::scope(|s| {
        for _ in 0..threads.max(1) {
            s.spawn(|| loop {
                let step = next.fetch_add(1, Ordering::SeqCst);
                if step >= cfg.steps || first_err.lock().unwrap().is_some() {
                    return;
                }
                match train_step(backend, data, cfg, step) {
                    Ok(l) => losses.lock().unwrap()[step as usize] = l,
                    Err(e) => {
                        first_err.lock().unwrap().get_or_insert(e);
                        return;
                    }
                }
            });
        }
    });
    if let Some(e) = first_err.into_inner().unwrap() {
        return Err(e);
    }
    Ok(TrainReport {
        losses: losses.into_inner().unwrap(),
    })
}

/// Fraction of held-out `(center, context)` pairs whose context is the top-1
/// retrieval for the center. Both tokens pass through the same cutoff used in
/// training; a context outside the dictionary can never be predicted.
pub fn eval_vocab_accuracy(
    backend: &dyn TrainingBackend,
    vocab: &Vocabulary,
    heldout: &[(String, String)],
    cutoff: Option<usize>,
    dim: usize,
) -> Result<f64> {
    if heldout.is_empty() {
        return Ok(0.0);
    }
    let centers: Vec<EmbeddingKey> = heldout
        .iter()
        .map(|(c, _)| EmbeddingKey::try_from(vocab.map(c, cutoff)))
        .collect::<Result<_>>()?;
    let acts = backend.lookup_entries(INPUT_TABLE, &centers)?;
    let mut correct = 0usize;
    for ((_, ctx), act) in heldout.iter().zip(acts) {
        if !vocab.keeps(ctx, cutoff) || ctx == OOV {
            continue;
        }
        let act = act.map(|e| e.vector).unwrap_or_else(|| vec![0.0; dim]);
        let top = backend.top_k(OUTPUT_TABLE, &act, 1)?;
        if top.first().is_some_and(|s| s.id.as_bytes() == ctx.as_bytes()) {
            correct += 1;
        }
    }
    Ok(correct as f64 / heldout.len() as f64)
}
