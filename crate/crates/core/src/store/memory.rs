use std::sync::RwLock;

use indexmap::IndexMap;

use super::Backend;
use crate::entry::EmbeddingEntry;
use crate::error::Result;
use crate::key::EmbeddingKey;

/// Everything resident in a map; keys keep their first-insertion order.
#[derive(Debug, Default)]
pub struct MemoryBackend {
    map: RwLock<IndexMap<EmbeddingKey, EmbeddingEntry>>,
}

impl MemoryBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_records(records: impl IntoIterator<Item = (EmbeddingKey, EmbeddingEntry)>) -> Self {
        Self {
            map: RwLock::new(records.into_iter().collect()),
        }
    }
}

impl Backend for MemoryBackend {
    fn get(&self, keys: &[EmbeddingKey]) -> Result<Vec<Option<EmbeddingEntry>>> {
        let map = self.map.read().unwrap();
        Ok(keys.iter().map(|k| map.get(k).cloned()).collect())
    }

    fn put(&self, entries: &[(EmbeddingKey, EmbeddingEntry)]) -> Result<()> {
        let mut map = self.map.write().unwrap();
        for (k, e) in entries {
            map.insert(k.clone(), e.clone());
        }
        Ok(())
    }

    fn len(&self) -> Result<usize> {
        Ok(self.map.read().unwrap().len())
    }

    fn scan(&self) -> Result<Vec<(EmbeddingKey, EmbeddingEntry)>> {
        Ok(self
            .map
            .read()
            .unwrap()
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect())
    }

    fn frequencies(&self) -> Result<Vec<(EmbeddingKey, u64)>> {
        Ok(self
            .map
            .read()
            .unwrap()
            .iter()
            .map(|(k, v)| (k.clone(), v.frequency))
            .collect())
    }

    fn visit(&self, f: &mut dyn FnMut(&EmbeddingKey, &EmbeddingEntry)) -> Result<()> {
        for (k, v) in self.map.read().unwrap().iter() {
            f(k, v);
        }
        Ok(())
    }
}
