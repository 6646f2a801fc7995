//! Distributions over a finite set of outcome embeddings.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{DynCellError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteDistribution {
    support: Vec<Vec<f32>>,
    probs: Vec<f64>,
}

impl DiscreteDistribution {
    pub fn new(support: Vec<Vec<f32>>, probs: Vec<f64>) -> Result<Self> {
        check_support(&support)?;
        if probs.len() != support.len() {
            return Err(DynCellError::InvalidDistribution(format!(
                "{} probabilities for {} outcomes",
                probs.len(),
                support.len()
            )));
        }
        if let Some(p) = probs.iter().find(|p| !(p.is_finite() && **p >= 0.0)) {
            return Err(DynCellError::InvalidDistribution(format!("probability {p}")));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(DynCellError::InvalidDistribution(format!(
                "probabilities sum to {total}"
            )));
        }
        Ok(Self { support, probs })
    }

    /// Normalizes non-negative weights.
    pub fn from_weights(support: Vec<Vec<f32>>, weights: &[f64]) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total.is_finite() && total > 0.0) {
            return Err(DynCellError::InvalidDistribution(format!("weights sum to {total}")));
        }
        Self::new(support, weights.iter().map(|w| w / total).collect())
    }

    pub fn uniform(support: Vec<Vec<f32>>) -> Result<Self> {
        let n = support.len();
        Self::new(support, vec![1.0 / n as f64; n])
    }

    pub fn support(&self) -> &[Vec<f32>] {
        &self.support
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn dim(&self) -> usize {
        self.support[0].len()
    }

    /// Expected outcome embedding `Σ p(x) x`.
    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim()];
        for (x, &p) in self.support.iter().zip(&self.probs) {
            for (mi, &xi) in m.iter_mut().zip(x) {
                *mi += p * xi as f64;
            }
        }
        m
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        -self
            .probs
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| p * p.ln())
            .sum::<f64>()
    }

    pub fn same_support(&self, other: &Self) -> bool {
        self.support == other.support
    }

    /// Index of an outcome drawn by inverse CDF.
    pub fn draw(&self, rng: &mut impl Rng) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, &p) in self.probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        self.probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
    }
}

fn check_support(support: &[Vec<f32>]) -> Result<()> {
    let Some(first) = support.first() else {
        return Err(DynCellError::SupportMismatch("empty support".into()));
    };
    if first.is_empty() {
        return Err(DynCellError::SupportMismatch("zero-dimensional outcomes".into()));
    }
    if support.iter().any(|x| x.len() != first.len()) {
        return Err(DynCellError::SupportMismatch("outcomes of unequal dimension".into()));
    }
    Ok(())
}

fn check_context(support: &[Vec<f32>], c: &[f64]) -> Result<()> {
    check_support(support)?;
    if c.len() != support[0].len() {
        return Err(DynCellError::SupportMismatch(format!(
            "context has dim {}, outcomes have dim {}",
            c.len(),
            support[0].len()
        )));
    }
    Ok(())
}

/// `log Z(c) = log Σ exp(⟨x, c⟩)`, computed with max subtraction.
pub fn log_partition(support: &[Vec<f32>], c: &[f64]) -> Result<f64> {
    check_context(support, c)?;
    let logits: Vec<f64> = support.iter().map(|x| crate::dot(x, c)).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln())
}

/// `P(x|c) = exp(⟨x, c⟩) / Z(c)` over `support`.
pub fn conditional(support: &[Vec<f32>], c: &[f64]) -> Result<DiscreteDistribution> {
    check_context(support, c)?;
    let logits: Vec<f64> = support.iter().map(|x| crate::dot(x, c)).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    DiscreteDistribution::from_weights(support.to_vec(), &weights)
}

/// `n` points drawn uniformly from the unit sphere in `dim` dimensions.
pub fn unit_sphere_support(n: usize, dim: usize, rng: &mut impl Rng) -> Vec<Vec<f32>> {
    (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| (x / norm) as f32).collect()
        })
        .collect()
}

/// Random probability vector with full support.
pub fn random_probs(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 1e-3).collect();
    let total: f64 = w.iter().sum();
    w.iter().map(|x| x / total).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_context_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = unit_sphere_support(10, 3, &mut rng);
        let p = conditional(&s, &[0.0; 3]).unwrap();
        for &q in p.probs() {
            assert!((q - 0.1).abs() < 1e-15);
        }
    }

    #[test]
    fn two_point_ratio_is_three() {
        let s = vec![vec![1.0f32], vec![-1.0]];
        let p = conditional(&s, &[3f64.ln() / 2.0]).unwrap();
        assert!((p.probs()[0] / p.probs()[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn large_logits_do_not_overflow() {
        let s = vec![vec![1.0f32], vec![0.0]];
        let p = conditional(&s, &[2000.0]).unwrap();
        assert_eq!(p.probs()[0], 1.0);
        assert!((log_partition(&s, &[2000.0]).unwrap() - 2000.0).abs() < 1e-9);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(conditional(&[], &[]).is_err());
        assert!(conditional(&[vec![1.0], vec![1.0, 2.0]], &[0.0]).is_err());
        assert!(conditional(&[vec![1.0]], &[0.0, 1.0]).is_err());
        assert!(DiscreteDistribution::new(vec![vec![1.0]], vec![0.5]).is_err());
        assert!(DiscreteDistribution::new(vec![vec![1.0], vec![2.0]], vec![1.5, -0.5]).is_err());
    }
}
