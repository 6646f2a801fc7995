use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// One key's mutable state: the stored vector, its update count and optimizer slots.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EmbeddingEntry {
    pub vector: Vec<f32>,
    pub frequency: u64,
    pub slots: BTreeMap<String, Vec<f32>>,
    pub last_update_step: u64,
}

impl EmbeddingEntry {
    pub fn new(vector: Vec<f32>) -> Self {
        Self {
            vector,
            ..Default::default()
        }
    }

    /// Checks the shape and finiteness invariants against the owning table's `stored_dim`.
    pub fn validate(&self, stored_dim: usize) -> Result<()> {
        if self.vector.len() != stored_dim {
            return Err(Error::DimensionMismatch {
                expected: stored_dim,
                got: self.vector.len(),
            });
        }
        if self.vector.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteValue("entry vector".into()));
        }
        for (name, slot) in &self.slots {
            if slot.len() != stored_dim {
                return Err(Error::DimensionMismatch {
                    expected: stored_dim,
                    got: slot.len(),
                });
            }
            if slot.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteValue(format!("slot `{name}`")));
            }
        }
        Ok(())
    }
}
