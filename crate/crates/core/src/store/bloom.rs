//! Counting Bloom filter used to admit keys only after repeated sightings.
//!
//! Counters are 4 bits wide and saturate at [`COUNTER_MAX`]. The estimate for
//! a key is the minimum over its counters, which never undercounts, so a key
//! sighted `t` times is always admitted at threshold `t` as long as none of
//! its counters saturated.

use xxhash_rust::xxh64::xxh64;

use crate::config::BloomSpec;
use crate::key::EmbeddingKey;

pub const COUNTER_MAX: u8 = 15;

const SEED_A: u64 = 0x9e37_79b9_7f4a_7c15;
const SEED_B: u64 = 0xc2b2_ae3d_27d4_eb4f;

#[derive(Debug, Clone)]
pub struct CountingBloomFilter {
    /// Two counters per byte, low nibble first.
    counters: Vec<u8>,
    num_counters: u64,
    num_hashes: u32,
    admit_threshold: u8,
}

/// Standard sizing: `m = -n ln p / (ln 2)^2`, `k = (m / n) ln 2`.
pub fn optimal_params(expected_keys: u64, fpp: f64) -> (u64, u32) {
    let n = expected_keys.max(1) as f64;
    let ln2 = std::f64::consts::LN_2;
    let m = (-n * fpp.ln() / (ln2 * ln2)).ceil().max(8.0);
    let k = ((m / n) * ln2).round().max(1.0);
    (m as u64, k as u32)
}

impl CountingBloomFilter {
    pub fn new(spec: &BloomSpec) -> Self {
        let (m, k) = optimal_params(spec.expected_keys, spec.target_false_positive_rate);
        Self {
            counters: vec![0; m.div_ceil(2) as usize],
            num_counters: m,
            num_hashes: k,
            admit_threshold: spec.admit_threshold.min(COUNTER_MAX as u32) as u8,
        }
    }

    pub fn num_counters(&self) -> u64 {
        self.num_counters
    }

    pub fn num_hashes(&self) -> u32 {
        self.num_hashes
    }

    fn positions<'a>(&'a self, key: &EmbeddingKey) -> impl Iterator<Item = u64> + 'a {
        let h1 = xxh64(key.as_bytes(), SEED_A);
        let h2 = xxh64(key.as_bytes(), SEED_B) | 1;
        let m = self.num_counters;
        (0..self.num_hashes as u64).map(move |i| h1.wrapping_add(i.wrapping_mul(h2)) % m)
    }

    fn get(&self, pos: u64) -> u8 {
        let byte = self.counters[(pos / 2) as usize];
        if pos.is_multiple_of(2) {
            byte & 0x0f
        } else {
            byte >> 4
        }
    }

    fn bump(&mut self, pos: u64) {
        let c = self.get(pos);
        if c == COUNTER_MAX {
            return;
        }
        let byte = &mut self.counters[(pos / 2) as usize];
        if pos.is_multiple_of(2) {
            *byte = (*byte & 0xf0) | (c + 1);
        } else {
            *byte = (*byte & 0x0f) | ((c + 1) << 4);
        }
    }

    /// Estimated number of sightings of `key` (never below the true count until saturation).
    pub fn estimate(&self, key: &EmbeddingKey) -> u8 {
        self.positions(key).map(|p| self.get(p)).min().unwrap_or(0)
    }

    /// Records one sighting and reports whether the key has now reached the threshold.
    pub fn admit(&mut self, key: &EmbeddingKey) -> bool {
        let positions: Vec<u64> = self.positions(key).collect();
        for p in positions {
            self.bump(p);
        }
        self.estimate(key) >= self.admit_threshold
    }

    /// Whether one more sighting of `key` would admit it, without recording anything.
    pub fn would_admit(&self, key: &EmbeddingKey) -> bool {
        self.estimate(key).saturating_add(1) >= self.admit_threshold
    }
}

/// Records a sighting of `key` in `filter`; true once the key has been seen
/// `admit_threshold` times.
pub fn bloom_admit(filter: &mut CountingBloomFilter, key: &EmbeddingKey) -> bool {
    filter.admit(key)
}
