//! Embedding keys and the frozen placement hash.

use std::fmt;

use serde::{Deserialize, Serialize};
use xxhash_rust::xxh64::xxh64;

use crate::error::{Error, Result};

/// Keys longer than this are rejected so wire frames stay bounded.
pub const MAX_KEY_LEN: usize = 64 * 1024;

/// A non-empty byte string naming one embedding. Ordered and compared by raw bytes.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EmbeddingKey(Vec<u8>);

impl EmbeddingKey {
    pub fn new(bytes: impl Into<Vec<u8>>) -> Result<Self> {
        let bytes = bytes.into();
        if bytes.is_empty() {
            return Err(Error::EmptyKey);
        }
        if bytes.len() > MAX_KEY_LEN {
            return Err(Error::KeyTooLarge(bytes.len()));
        }
        Ok(Self(bytes))
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Lossy UTF-8 rendering, for logs and reports.
    pub fn to_string_lossy(&self) -> String {
        String::from_utf8_lossy(&self.0).into_owned()
    }
}

impl fmt::Debug for EmbeddingKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", String::from_utf8_lossy(&self.0))
    }
}

impl fmt::Display for EmbeddingKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&String::from_utf8_lossy(&self.0))
    }
}

impl TryFrom<&str> for EmbeddingKey {
    type Error = Error;

    fn try_from(s: &str) -> Result<Self> {
        Self::new(s.as_bytes())
    }
}

impl TryFrom<String> for EmbeddingKey {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        Self::new(s.into_bytes())
    }
}

/// Convenience for building key lists in tests and tools. Panics on invalid keys.
pub fn keys<I, S>(items: I) -> Vec<EmbeddingKey>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    items
        .into_iter()
        .map(|s| EmbeddingKey::new(s.as_ref().as_bytes()).expect("valid key"))
        .collect()
}

/// XXH64 of the key bytes with seed 0.
///
/// This value decides shard placement (`key_hash(k) % n_workers`) and is part
/// of the on-disk contract: it must never change.
pub fn key_hash(key: &EmbeddingKey) -> u64 {
    xxh64(key.as_bytes(), 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn empty_and_oversized_keys_are_rejected() {
        assert_eq!(EmbeddingKey::new(Vec::new()), Err(Error::EmptyKey));
        assert_eq!(
            EmbeddingKey::new(vec![b'x'; MAX_KEY_LEN + 1]),
            Err(Error::KeyTooLarge(MAX_KEY_LEN + 1))
        );
        assert!(EmbeddingKey::new(vec![b'x'; MAX_KEY_LEN]).is_ok());
    }

    #[test]
    fn hash_is_frozen() {
        // Pinned values; a change here silently reshuffles every deployment.
        let a = EmbeddingKey::try_from("a").unwrap();
        assert_eq!(key_hash(&a), 0xd24ec4f1a98c6e5b);
        assert_eq!(key_hash(&a), key_hash(&a.clone()));
    }

    #[test]
    fn hash_spreads_evenly_over_eight_shards() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut counts = [0usize; 8];
        let n = 100_000;
        for _ in 0..n {
            let len = rng.random_range(1..24);
            let bytes: Vec<u8> = (0..len).map(|_| rng.random_range(b'a'..=b'z')).collect();
            let k = EmbeddingKey::new(bytes).unwrap();
            counts[(key_hash(&k) % 8) as usize] += 1;
        }
        for c in counts {
            let frac = c as f64 / n as f64;
            assert!((frac - 0.125).abs() <= 0.01, "shard fraction {frac}");
        }
    }
}
