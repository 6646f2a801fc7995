//! Deterministic per-key initialization.
//!
//! Each key gets its own generator seeded with `xxh64(key, table_seed)`, so a
//! key's first vector is the same no matter which worker materializes it or
//! how many workers there are.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use xxhash_rust::xxh64::xxh64;

use crate::config::{Initializer, TableConfig};
use crate::key::EmbeddingKey;

/// Returns a `stored_dim`-length vector for a key seen for the first time.
/// The bias slot of biased tables starts at zero.
pub fn init_vector(key: &EmbeddingKey, config: &TableConfig) -> Vec<f32> {
    let dim = config.embedding_dim as usize;
    let mut v = Vec::with_capacity(config.stored_dim());
    match config.initializer {
        Initializer::Zeros => v.resize(dim, 0.0),
        Initializer::Constant { value } => v.resize(dim, value),
        Initializer::Uniform { range } => {
            let mut rng = key_rng(key, config.seed);
            v.extend((0..dim).map(|_| rng.random_range(-range..range)));
        }
        Initializer::Normal { sigma } => {
            let mut rng = key_rng(key, config.seed);
            let normal = Normal::new(0.0f32, sigma).expect("validated sigma");
            v.extend((0..dim).map(|_| normal.sample(&mut rng)));
        }
    }
    if config.has_bias {
        v.push(0.0);
    }
    v
}

fn key_rng(key: &EmbeddingKey, seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(xxh64(key.as_bytes(), seed))
}
