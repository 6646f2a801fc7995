//! Surprise functionals and the equilibrium residuals of a cell.

use crate::dist::{conditional, log_partition, DiscreteDistribution};
use crate::error::{DynCellError, Result};
use crate::IDENTITY_TOL;

/// `D_KL(p ∥ q)` over a shared support.
pub fn kl_divergence(p: &DiscreteDistribution, q: &DiscreteDistribution) -> Result<f64> {
    if !p.same_support(q) {
        return Err(DynCellError::SupportMismatch(
            "KL of distributions on different supports".into(),
        ));
    }
    let mut kl = 0.0;
    for (&pi, &qi) in p.probs().iter().zip(q.probs()) {
        if pi > 0.0 {
            if qi == 0.0 {
                return Ok(f64::INFINITY);
            }
            kl += pi * (pi / qi).ln();
        }
    }
    Ok(kl.max(0.0))
}

fn agree(what: &'static str, a: f64, b: f64) -> Result<()> {
    if (a - b).abs() > IDENTITY_TOL * a.abs().max(b.abs()).max(1.0) {
        return Err(DynCellError::IdentityViolated { what, a, b });
    }
    Ok(())
}

/// `D_KL(P_w ∥ P(·|c))`, the surprise of a cell in state `P_w` given context `c`.
///
/// Also evaluates the expansion `−Σ P_w(x)⟨x, c⟩ + log Z(c) − H(P_w)` and
/// fails if the two disagree.
pub fn internal_surprise(p_w: &DiscreteDistribution, c: &[f64]) -> Result<f64> {
    let p_c = conditional(p_w.support(), c)?;
    let kl = kl_divergence(p_w, &p_c)?;
    let expected_energy: f64 = p_w
        .support()
        .iter()
        .zip(p_w.probs())
        .map(|(x, &p)| p * crate::dot(x, c))
        .sum();
    let expanded = -expected_energy + log_partition(p_w.support(), c)? - p_w.entropy();
    agree("surprise expansion", kl, expanded)?;
    Ok(kl)
}

/// `⟨w⟩_{P(·|c)} − ⟨w⟩_{P_w}`.
///
/// This is the gradient of [`internal_surprise`] with respect to `c` with the
/// entropy of `P_w` held fixed; it vanishes at equilibrium.
pub fn internal_equilibrium_residual(p_w: &DiscreteDistribution, c: &[f64]) -> Result<Vec<f64>> {
    let p_c = conditional(p_w.support(), c)?;
    Ok(p_c.mean().iter().zip(p_w.mean()).map(|(a, b)| a - b).collect())
}

/// `⟨ŵ⟩_{P_ŵ} − ⟨ŵ⟩_{P_w}` for feedback embeddings indexed like the action support.
pub fn upstream_equilibrium_residual(p_hat: &DiscreteDistribution, p_w: &DiscreteDistribution) -> Result<Vec<f64>> {
    if !p_hat.same_support(p_w) {
        return Err(DynCellError::SupportMismatch(
            "upstream and action distributions must share the feedback support".into(),
        ));
    }
    Ok(p_hat.mean().iter().zip(p_w.mean()).map(|(a, b)| a - b).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContextDivergence {
    /// `D_KL(P(·|c1) ∥ P(·|c2))`.
    pub kl: f64,
    /// `E_{P(·|c1)}⟨w, c1 − c2⟩ − (log Z(c1) − log Z(c2))`.
    pub surrogate: f64,
}

/// How far apart two contexts place the cell's state.
pub fn context_divergence(c1: &[f64], c2: &[f64], support: &[Vec<f32>]) -> Result<ContextDivergence> {
    if c1.len() != c2.len() {
        return Err(DynCellError::SupportMismatch("contexts of different dimension".into()));
    }
    let p1 = conditional(support, c1)?;
    let p2 = conditional(support, c2)?;
    let kl = kl_divergence(&p1, &p2)?;
    let diff: Vec<f64> = c1.iter().zip(c2).map(|(a, b)| a - b).collect();
    let projected: f64 = support
        .iter()
        .zip(p1.probs())
        .map(|(x, &p)| p * crate::dot(x, &diff))
        .sum();
    let surrogate = projected - (log_partition(support, c1)? - log_partition(support, c2)?);
    agree("context divergence surrogate", kl, surrogate)?;
    Ok(ContextDivergence { kl, surrogate })
}
