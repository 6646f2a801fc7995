//! How crowded a bounded context space gets as contexts are added.
//!
//! Contexts have every coordinate in `[-bound, bound]` and the outcome
//! support lies on the unit sphere. The smallest pairwise divergence between
//! the conditionals of `m` contexts shrinks as `m` grows and recovers as the
//! dimension grows.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dist::{conditional, unit_sphere_support};
use crate::error::Result;
use crate::surprise::kl_divergence;

pub fn random_contexts(m: usize, dim: usize, bound: f64, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    (0..m)
        .map(|_| (0..dim).map(|_| rng.random_range(-bound..=bound)).collect())
        .collect()
}

/// `min_{i≠j} D_KL(P(·|c_i) ∥ P(·|c_j))`.
pub fn min_pairwise_divergence(contexts: &[Vec<f64>], support: &[Vec<f32>]) -> Result<f64> {
    let dists = contexts
        .iter()
        .map(|c| conditional(support, c))
        .collect::<Result<Vec<_>>>()?;
    let mut min = f64::INFINITY;
    for (i, p) in dists.iter().enumerate() {
        for (j, q) in dists.iter().enumerate() {
            if i != j {
                min = min.min(kl_divergence(p, q)?);
            }
        }
    }
    Ok(min)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaturationTable {
    pub dims: Vec<usize>,
    pub counts: Vec<usize>,
    /// `mean_min[d][m]`: minimum pairwise divergence averaged over seeds.
    pub mean_min: Vec<Vec<f64>>,
}

impl SaturationTable {
    /// Strictly decreasing along the context count for every dimension.
    pub fn decreases_with_count(&self) -> bool {
        self.mean_min.iter().all(|row| row.windows(2).all(|w| w[1] < w[0]))
    }

    /// Strictly increasing along the dimension for every context count.
    pub fn increases_with_dim(&self) -> bool {
        (0..self.counts.len()).all(|m| self.mean_min.windows(2).all(|w| w[1][m] > w[0][m]))
    }
}

/// For each seed, one support and one context list per dimension; the
/// first `m` contexts are used for count `m`.
pub fn saturation_sweep(
    dims: &[usize],
    counts: &[usize],
    support_size: usize,
    bound: f64,
    seeds: &[u64],
) -> Result<SaturationTable> {
    let max_m = counts.iter().copied().max().unwrap_or(0);
    let mut mean_min = vec![vec![0.0; counts.len()]; dims.len()];
    for &seed in seeds {
        for (di, &d) in dims.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1_000_003).wrapping_add(d as u64));
            let support = unit_sphere_support(support_size, d, &mut rng);
            let contexts = random_contexts(max_m, d, bound, &mut rng);
            for (mi, &m) in counts.iter().enumerate() {
                mean_min[di][mi] += min_pairwise_divergence(&contexts[..m], &support)? / seeds.len() as f64;
            }
        }
    }
    Ok(SaturationTable {
        dims: dims.to_vec(),
        counts: counts.to_vec(),
        mean_min,
    })
}
