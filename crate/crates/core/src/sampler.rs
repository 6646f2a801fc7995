//! Candidate sampling over the resident key universe and sampled-softmax logits.
//!
//! A sample is built in two stages so that the single-store and sharded
//! paths run the same code:
//!
//! 1. [`shard_sample`] runs on one shard's frequency index. It ranks every
//!    key and returns the `num_sampled` best with their ranks, plus the
//!    shard's total strategy weight.
//! 2. [`merge_shard_samples`] keeps the `num_sampled` best ranks over all
//!    shards, folds accidental hits into the positives and normalizes the
//!    probabilities.
//!
//! A key's rank is `ln(u) / w` with `u` derived from `xxh64(key, seed)`, so
//! it does not depend on which shard holds the key. Taking the largest ranks
//! is a weighted sample without replacement, and the merged result is the
//! same for every number of shards.

use indexmap::IndexSet;
use xxhash_rust::xxh64::xxh64;

use crate::config::SamplerStrategy;
use crate::error::{Error, Result};
use crate::key::EmbeddingKey;

#[derive(Debug, Clone, PartialEq)]
pub struct SampledResult {
    pub id: EmbeddingKey,
    pub is_positive: bool,
    pub prob: f64,
}

/// Unnormalized draw weight of a key with the given update count.
pub fn strategy_weight(strategy: SamplerStrategy, frequency: u64) -> f64 {
    match strategy {
        SamplerStrategy::Uniform => 1.0,
        SamplerStrategy::FrequencyPower { power } => (frequency.max(1) as f64).powf(power as f64),
    }
}

/// A weight in fixed point with 32 fractional bits. Integer sums do not
/// depend on grouping, so a total built from per-shard subtotals is the same
/// for any sharding. Weights are at least 1, so the rounding is far below f64
/// precision of the total.
pub fn fixed_weight(w: f64) -> u128 {
    (w * (1u64 << 32) as f64).round() as u128
}

/// Normalized probabilities of every key in the universe, in index order.
pub fn strategy_probabilities(index: &[(EmbeddingKey, u64)], strategy: SamplerStrategy) -> Vec<f64> {
    let w: Vec<f64> = index.iter().map(|(_, f)| strategy_weight(strategy, *f)).collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|x| x / z).collect()
}

/// Distinct keys in first-occurrence order.
pub fn distinct(keys: &[EmbeddingKey]) -> Vec<EmbeddingKey> {
    keys.iter().cloned().collect::<IndexSet<_>>().into_iter().collect()
}

/// Where a positive stands on one shard.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PositiveWeight {
    pub weight: f64,
    /// False if the key is resident but cut off by `range`.
    pub in_universe: bool,
}

/// One shard's contribution to a sample.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ShardSample {
    /// Sum of strategy weights in fixed point, see [`fixed_weight`].
    pub total_weight: u128,
    pub resident: u64,
    /// Parallel to the positives passed in: `Some` iff the key is resident here.
    pub positives: Vec<Option<PositiveWeight>>,
    /// The shard's best-ranked keys, best first.
    pub drawn: Vec<Draw>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Draw {
    pub key: EmbeddingKey,
    /// Unnormalized strategy weight.
    pub weight: f64,
    pub rank: f64,
}

/// `ln(u) / weight` with `u` in (0, 1) fixed by the key and the request seed.
pub fn draw_rank(key: &EmbeddingKey, seed: u64, weight: f64) -> f64 {
    let u = ((xxh64(key.as_bytes(), seed) >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64);
    u.ln() / weight
}

/// Best rank first; equal ranks by key bytes.
fn draw_order(a: &Draw, b: &Draw) -> std::cmp::Ordering {
    b.rank
        .total_cmp(&a.rank)
        .then_with(|| a.key.as_bytes().cmp(b.key.as_bytes()))
}

/// Restricts the universe to the `range` most frequent keys (0 = all).
/// Ties keep index order.
fn restrict(index: &[(EmbeddingKey, u64)], range: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..index.len()).collect();
    if range > 0 && range < index.len() {
        ids.sort_by(|&a, &b| index[b].1.cmp(&index[a].1));
        ids.truncate(range);
    }
    ids
}

/// The `count` best-ranked keys of one shard's index.
pub fn shard_sample(
    index: &[(EmbeddingKey, u64)],
    positives: &[EmbeddingKey],
    count: usize,
    seed: u64,
    strategy: SamplerStrategy,
    range: usize,
) -> ShardSample {
    let universe = restrict(index, range);
    let weights: Vec<f64> = universe
        .iter()
        .map(|&i| strategy_weight(strategy, index[i].1))
        .collect();
    let total_weight: u128 = weights.iter().map(|&w| fixed_weight(w)).fold(0, u128::saturating_add);

    let mut pos: Vec<Option<PositiveWeight>> = vec![None; positives.len()];
    if !positives.is_empty() {
        let lookup: std::collections::HashMap<&EmbeddingKey, usize> =
            positives.iter().enumerate().map(|(i, k)| (k, i)).collect();
        let mut in_universe = vec![false; index.len()];
        for &i in &universe {
            in_universe[i] = true;
        }
        for (i, (k, f)) in index.iter().enumerate() {
            if let Some(&p) = lookup.get(k) {
                pos[p] = Some(PositiveWeight {
                    weight: strategy_weight(strategy, *f),
                    in_universe: in_universe[i],
                });
            }
        }
    }

    let take = count.min(universe.len());
    let mut drawn: Vec<Draw> = universe
        .iter()
        .zip(&weights)
        .map(|(&i, &weight)| Draw {
            key: index[i].0.clone(),
            weight,
            rank: draw_rank(&index[i].0, seed, weight),
        })
        .collect();
    if take > 0 && take < drawn.len() {
        drawn.select_nth_unstable_by(take - 1, draw_order);
    }
    drawn.truncate(take);
    drawn.sort_by(draw_order);

    ShardSample {
        total_weight,
        resident: universe.len() as u64,
        positives: pos,
        drawn,
    }
}

/// Combines per-shard samples into the final positives-first result.
///
/// `positives` must be distinct; every shard sample must have been computed
/// for the same list.
pub fn merge_shard_samples(
    positives: &[EmbeddingKey],
    shards: &[ShardSample],
    num_sampled: usize,
    strategy: SamplerStrategy,
) -> Result<Vec<SampledResult>> {
    if num_sampled == 0 {
        return Err(Error::InvalidArgument("num_sampled must be at least 1".into()));
    }
    let resident: u64 = shards.iter().map(|s| s.resident).sum();
    if resident == 0 && positives.is_empty() {
        return Err(Error::EmptyUniverse);
    }
    let z = shards.iter().map(|s| s.total_weight).fold(0, u128::saturating_add);
    // Numerator and denominator in the same fixed-point units keep a lone
    // key at probability exactly 1.
    let share = |w: f64, total: u128| fixed_weight(w) as f64 / total as f64;
    let mut out = Vec::with_capacity(positives.len() + num_sampled);
    for (i, key) in positives.iter().enumerate() {
        let found = shards.iter().find_map(|s| s.positives.get(i).copied().flatten());
        let prob = match found {
            Some(p) if p.in_universe => share(p.weight, z),
            Some(p) => share(p.weight, z + fixed_weight(p.weight)),
            None => {
                let w0 = strategy_weight(strategy, 0);
                share(w0, z + fixed_weight(w0))
            }
        };
        out.push(SampledResult {
            id: key.clone(),
            is_positive: true,
            prob,
        });
    }
    let mut drawn: Vec<&Draw> = shards.iter().flat_map(|s| &s.drawn).collect();
    drawn.sort_by(|a, b| draw_order(a, b));
    drawn.truncate(num_sampled);
    let pos_set: std::collections::HashSet<&EmbeddingKey> = positives.iter().collect();
    for d in drawn {
        if pos_set.contains(&d.key) {
            continue;
        }
        out.push(SampledResult {
            id: d.key.clone(),
            is_positive: false,
            prob: share(d.weight, z),
        });
    }
    Ok(out)
}

/// Samples from a single store's frequency index, as shard 0 of 1.
pub fn sample(
    index: &[(EmbeddingKey, u64)],
    positives: &[EmbeddingKey],
    num_sampled: usize,
    seed: u64,
    strategy: SamplerStrategy,
    range: usize,
) -> Result<Vec<SampledResult>> {
    let positives = distinct(positives);
    let shard = shard_sample(index, &positives, num_sampled, seed, strategy, range);
    merge_shard_samples(&positives, &[shard], num_sampled, strategy)
}

/// Expected number of occurrences of `r` in a sample of `num_sampled` draws.
pub fn expected_count(r: &SampledResult, num_sampled: usize) -> f64 {
    let e = r.prob * num_sampled as f64;
    if r.is_positive {
        e.min(1.0)
    } else {
        e
    }
}

/// `⟨c, w⟩ + b` for a stored vector, where `b` is the trailing bias slot if present.
pub fn raw_logit(activation: &[f32], stored: &[f32], has_bias: bool) -> f64 {
    let dot: f64 = activation.iter().zip(stored).map(|(&a, &w)| a as f64 * w as f64).sum();
    if has_bias {
        dot + stored[activation.len()] as f64
    } else {
        dot
    }
}

/// Sampled-softmax logits for a batch sharing one candidate set.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledLogits {
    pub results: Vec<SampledResult>,
    /// Stored vectors of the candidates, parallel to `results`.
    pub vectors: Vec<Vec<f32>>,
    /// One row per activation, one column per candidate.
    pub logits: Vec<Vec<f32>>,
    /// True where the column is one of that row's own positives.
    pub labels: Vec<Vec<bool>>,
}

/// Corrected logits `⟨c, w⟩ + b − ln(expected_count)` for every row and candidate.
pub fn sampled_logits(
    activations: &[Vec<f32>],
    row_positives: &[Vec<EmbeddingKey>],
    results: Vec<SampledResult>,
    vectors: Vec<Vec<f32>>,
    num_sampled: usize,
    embedding_dim: usize,
    has_bias: bool,
) -> Result<SampledLogits> {
    if activations.len() != row_positives.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} activations but {} positive lists",
            activations.len(),
            row_positives.len()
        )));
    }
    let stored_dim = embedding_dim + has_bias as usize;
    for a in activations {
        if a.len() != embedding_dim {
            return Err(Error::DimensionMismatch {
                expected: embedding_dim,
                got: a.len(),
            });
        }
        if a.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteValue("activation".into()));
        }
    }
    for v in &vectors {
        if v.len() != stored_dim {
            return Err(Error::DimensionMismatch {
                expected: stored_dim,
                got: v.len(),
            });
        }
    }
    let corrections: Vec<f64> = results.iter().map(|r| expected_count(r, num_sampled).ln()).collect();
    let mut logits = Vec::with_capacity(activations.len());
    let mut labels = Vec::with_capacity(activations.len());
    for (a, pos) in activations.iter().zip(row_positives) {
        let own: std::collections::HashSet<&EmbeddingKey> = pos.iter().collect();
        logits.push(
            vectors
                .iter()
                .zip(&corrections)
                .map(|(v, corr)| (raw_logit(a, v, has_bias) - corr) as f32)
                .collect(),
        );
        labels.push(results.iter().map(|r| own.contains(&r.id)).collect());
    }
    Ok(SampledLogits {
        results,
        vectors,
        logits,
        labels,
    })
}

/// Softmax cross-entropy against multi-hot targets normalized to sum to 1.
/// Returns the loss and its gradient with respect to the logits.
pub fn softmax_cross_entropy(logits: &[f32], labels: &[bool]) -> Result<(f64, Vec<f32>)> {
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 || logits.len() != labels.len() {
        return Err(Error::InvalidArgument("row needs at least one positive label".into()));
    }
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x as f64));
    let exps: Vec<f64> = logits.iter().map(|&x| (x as f64 - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let log_z = max + z.ln();
    let t = 1.0 / n_pos as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for ((&x, &l), e) in logits.iter().zip(labels).zip(&exps) {
        let target = if l { t } else { 0.0 };
        if l {
            loss -= t * (x as f64 - log_z);
        }
        grad.push((e / z - target) as f32);
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::key::keys;

    fn index(items: &[(&str, u64)]) -> Vec<(EmbeddingKey, u64)> {
        items
            .iter()
            .map(|(k, f)| (EmbeddingKey::try_from(*k).unwrap(), *f))
            .collect()
    }

    #[test]
    fn single_key_universe_folds_the_draw() {
        let idx = index(&[("a", 0)]);
        let got = sample(&idx, &keys(["a", "a"]), 1, 1, SamplerStrategy::Uniform, 0).unwrap();
        assert_eq!(got.len(), 1);
        assert!(got[0].is_positive);
        assert_eq!(got[0].prob, 1.0);
    }

    #[test]
    fn uniform_negatives_report_quarter() {
        let idx = index(&[("a", 0), ("b", 0), ("c", 0), ("d", 0)]);
        let got = sample(&idx, &[], 2, 3, SamplerStrategy::Uniform, 0).unwrap();
        assert_eq!(got.len(), 2);
        assert_ne!(got[0].id, got[1].id);
        assert!(got.iter().all(|r| !r.is_positive && r.prob == 0.25));
    }

    #[test]
    fn empty_universe() {
        assert_eq!(
            sample(&[], &[], 3, 0, SamplerStrategy::Uniform, 0),
            Err(Error::EmptyUniverse)
        );
        let got = sample(&[], &keys(["x"]), 3, 0, SamplerStrategy::Uniform, 0).unwrap();
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].prob, 1.0);
    }

    #[test]
    fn unresident_positive_gets_one_extra_share() {
        let idx = index(&[("a", 3), ("b", 1)]);
        let got = sample(
            &idx,
            &keys(["z"]),
            1,
            0,
            SamplerStrategy::FrequencyPower { power: 1.0 },
            0,
        )
        .unwrap();
        assert_eq!(got[0].prob, 1.0 / 5.0);
    }

    #[test]
    fn range_keeps_most_frequent() {
        let idx = index(&[("a", 1), ("b", 9), ("c", 5), ("d", 2)]);
        for seed in 0..20 {
            let got = sample(&idx, &[], 2, seed, SamplerStrategy::Uniform, 2).unwrap();
            let mut ids: Vec<String> = got.iter().map(|r| r.id.to_string()).collect();
            ids.sort();
            assert_eq!(ids, vec!["b", "c"]);
            assert!(got.iter().all(|r| r.prob == 0.5));
        }
    }

    #[test]
    fn sharded_merge_equals_single_store() {
        let idx: Vec<(EmbeddingKey, u64)> = (0..60)
            .map(|i| (EmbeddingKey::try_from(format!("k{i}")).unwrap(), i as u64 % 7))
            .collect();
        let s = SamplerStrategy::FrequencyPower { power: 0.75 };
        let positives = keys(["k3", "zz"]);
        for seed in 0..20 {
            let whole = sample(&idx, &positives, 9, seed, s, 0).unwrap();
            for n in [2u64, 3, 5] {
                let shards: Vec<ShardSample> = (0..n)
                    .map(|r| {
                        let part: Vec<_> = idx
                            .iter()
                            .filter(|(k, _)| crate::key::key_hash(k) % n == r)
                            .cloned()
                            .collect();
                        shard_sample(&part, &positives, 9, seed, s, 0)
                    })
                    .collect();
                assert_eq!(merge_shard_samples(&positives, &shards, 9, s).unwrap(), whole);
            }
        }
    }

    #[test]
    fn augmented_dot_product() {
        assert_eq!(raw_logit(&[1.0, 0.0], &[2.0, 3.0, 0.5], true), 2.5);
        assert_eq!(raw_logit(&[0.0, 0.0], &[2.0, 3.0, -0.7], true), -0.7f32 as f64);
    }

    #[test]
    fn ragged_rows_share_candidates() {
        let idx: Vec<(EmbeddingKey, u64)> = (0..20)
            .map(|i| (EmbeddingKey::try_from(format!("k{i}")).unwrap(), 1))
            .collect();
        let rows = [keys(["k1"]), keys(["k2", "k3", "k4", "k5", "k6", "k7", "k8"])];
        let all: Vec<EmbeddingKey> = rows.iter().flatten().cloned().collect();
        let res = sample(&idx, &all, 5, 9, SamplerStrategy::Uniform, 0).unwrap();
        let n_pos = res.iter().filter(|r| r.is_positive).count();
        assert_eq!(n_pos, 8);
        assert!(res.len() <= 13);
        let vecs = vec![vec![0.0f32; 3]; res.len()];
        let acts = vec![vec![0.0f32; 2]; 2];
        let out = sampled_logits(&acts, &rows, res, vecs, 5, 2, true).unwrap();
        assert_eq!(out.labels[0].iter().filter(|&&l| l).count(), 1);
        assert_eq!(out.labels[1].iter().filter(|&&l| l).count(), 7);
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_difference() {
        let logits = [0.3f32, -1.2, 2.0, 0.1];
        let labels = [true, false, true, false];
        let (_, grad) = softmax_cross_entropy(&logits, &labels).unwrap();
        for i in 0..4 {
            let mut up = logits;
            let mut dn = logits;
            up[i] += 1e-3;
            dn[i] -= 1e-3;
            let fd = (softmax_cross_entropy(&up, &labels).unwrap().0 - softmax_cross_entropy(&dn, &labels).unwrap().0)
                / 2e-3;
            assert!((fd - grad[i] as f64).abs() < 1e-3, "{i}: {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn prefix_of_draws_is_stable_under_smaller_counts() {
        let idx: Vec<(EmbeddingKey, u64)> = (0..50)
            .map(|i| (EmbeddingKey::try_from(format!("k{i}")).unwrap(), i as u64))
            .collect();
        let s = SamplerStrategy::FrequencyPower { power: 0.75 };
        let big = shard_sample(&idx, &[], 20, 5, s, 0);
        let small = shard_sample(&idx, &[], 7, 5, s, 0);
        assert_eq!(small.drawn[..], big.drawn[..7]);
        assert!(big.drawn.windows(2).all(|w| w[0].rank >= w[1].rank));
    }
}
