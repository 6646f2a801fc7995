#![allow(dead_code)]

use std::io::Write;
use std::sync::OnceLock;

use dynembed::client::corpus::ZipfCorpus;
use dynembed::client::skipgram::{SkipGramConfig, SkipGramData};
use dynembed::{EmbeddingEntry, EmbeddingKey, OptimizerKind, OptimizerSpec};

pub const CORPUS_BYTES: usize = 1_000_000;

pub fn zipf_text() -> &'static str {
    static TEXT: OnceLock<String> = OnceLock::new();
    TEXT.get_or_init(|| ZipfCorpus::default().generate(CORPUS_BYTES))
}

pub fn zipf_data() -> &'static SkipGramData {
    static DATA: OnceLock<SkipGramData> = OnceLock::new();
    DATA.get_or_init(|| SkipGramData::from_text(zipf_text(), 1, None).unwrap())
}

pub fn optimizer(kind: OptimizerKind) -> OptimizerSpec {
    let lr = match kind {
        OptimizerKind::Sgd => 5.0,
        OptimizerKind::Adagrad => 0.2,
        OptimizerKind::Momentum => 0.1,
    };
    OptimizerSpec::with_defaults(kind, lr)
}

/// The benchmark setup: 5000 steps, batch 64, dim 32, 16 sampled negatives.
pub fn skipgram_config(kind: OptimizerKind, seed: u64) -> SkipGramConfig {
    SkipGramConfig {
        window: 1,
        dim: 32,
        num_sampled: 16,
        optimizer: optimizer(kind),
        steps: 5000,
        batch: 64,
        seed,
        cutoff: None,
        ..Default::default()
    }
}

/// One line per criterion on the real stdout, so it shows without `--nocapture`.
pub fn report(criterion: u32, passed: bool, detail: impl std::fmt::Display) {
    let line = format!(
        "acceptance criterion {criterion:>2}: {} {detail}\n",
        if passed { "PASS" } else { "FAIL" }
    );
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
}

pub type EntryBits = (Vec<u32>, u64, Vec<(String, Vec<u32>)>, u64);

pub fn entry_bits(e: &EmbeddingEntry) -> EntryBits {
    (
        e.vector.iter().map(|x| x.to_bits()).collect(),
        e.frequency,
        e.slots
            .iter()
            .map(|(k, v)| (k.clone(), v.iter().map(|x| x.to_bits()).collect()))
            .collect(),
        e.last_update_step,
    )
}

pub fn entries_bits(entries: &[Option<EmbeddingEntry>]) -> Vec<Option<EntryBits>> {
    entries.iter().map(|e| e.as_ref().map(entry_bits)).collect()
}

pub fn key(s: &str) -> EmbeddingKey {
    EmbeddingKey::try_from(s).unwrap()
}
