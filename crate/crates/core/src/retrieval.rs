//! Exact maximum-inner-product top-k, per shard and merged.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::key::EmbeddingKey;

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredKey {
    pub id: EmbeddingKey,
    pub score: f32,
}

/// Score descending, then id bytes ascending.
pub fn rank_order(a: &ScoredKey, b: &ScoredKey) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.id.as_bytes().cmp(b.id.as_bytes()))
}

/// `⟨[c; 1], stored⟩` when the table has a bias slot, `⟨c, stored⟩` otherwise.
pub fn score(activation: &[f32], stored: &[f32], has_bias: bool) -> f32 {
    let dot: f32 = activation.iter().zip(stored).map(|(a, w)| a * w).sum();
    if has_bias {
        dot + stored[activation.len()]
    } else {
        dot
    }
}

/// Exact local top-k over `(key, stored_vector)` pairs.
pub fn worker_top_k<'a, I>(entries: I, activation: &[f32], k: usize, has_bias: bool) -> Result<Vec<ScoredKey>>
where
    I: IntoIterator<Item = (&'a EmbeddingKey, &'a [f32])>,
{
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if activation.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFiniteValue("activation".into()));
    }
    let stored_dim = activation.len() + has_bias as usize;
    let mut scored = Vec::new();
    for (key, v) in entries {
        if v.len() != stored_dim {
            return Err(Error::DimensionMismatch {
                expected: v.len() - has_bias as usize,
                got: activation.len(),
            });
        }
        scored.push(ScoredKey {
            id: key.clone(),
            score: score(activation, v, has_bias),
        });
    }
    Ok(select_top(scored, k))
}

fn select_top(mut scored: Vec<ScoredKey>, k: usize) -> Vec<ScoredKey> {
    if scored.len() > k {
        scored.select_nth_unstable_by(k - 1, rank_order);
        scored.truncate(k);
    }
    scored.sort_by(rank_order);
    scored
}

/// Global top-k of the union of per-shard lists.
pub fn merge_top_k(lists: &[Vec<ScoredKey>], k: usize) -> Vec<ScoredKey> {
    if k == 0 {
        return Vec::new();
    }
    select_top(lists.iter().flatten().cloned().collect(), k)
}
