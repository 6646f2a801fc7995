//! Deterministic key placement.

use crate::key::{key_hash, EmbeddingKey};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShardMap {
    pub worker_addresses: Vec<String>,
}

impl ShardMap {
    pub fn new(worker_addresses: Vec<String>) -> Self {
        Self { worker_addresses }
    }

    /// Parses a comma-separated `host:port` list.
    pub fn parse(list: &str) -> Self {
        Self::new(
            list.split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(String::from)
                .collect(),
        )
    }

    pub fn n_workers(&self) -> u32 {
        self.worker_addresses.len() as u32
    }
}

/// `key_hash(key) mod n_workers`.
pub fn shard_of(key: &EmbeddingKey, n_workers: u32) -> u32 {
    (key_hash(key) % n_workers.max(1) as u64) as u32
}

/// Groups positions by shard, keeping their relative order.
pub fn partition(keys: &[EmbeddingKey], n_workers: u32) -> Vec<Vec<usize>> {
    let mut parts = vec![Vec::new(); n_workers.max(1) as usize];
    for (i, k) in keys.iter().enumerate() {
        parts[shard_of(k, n_workers) as usize].push(i);
    }
    parts
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::key::keys;

    #[test]
    fn parse_address_list() {
        let m = ShardMap::parse("a:1, b:2,");
        assert_eq!(m.worker_addresses, vec!["a:1", "b:2"]);
        assert_eq!(m.n_workers(), 2);
    }

    #[test]
    fn partition_keeps_duplicate_positions() {
        let ks = keys(["a", "b", "a"]);
        let parts = partition(&ks, 4);
        let sa = shard_of(&ks[0], 4) as usize;
        assert!(parts[sa].contains(&0) && parts[sa].contains(&2));
        assert_eq!(parts.iter().map(Vec::len).sum::<usize>(), 3);
        assert_eq!(partition(&ks, 1), vec![vec![0, 1, 2]]);
    }
}
