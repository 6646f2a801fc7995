//! Sparse, per-entry gradient updaters.
//!
//! Each updater touches only the entry it is given, so rows (and slots) of
//! keys absent from a batch are never modified. The float operations are
//! written out in a fixed order so that the same gradient stream produces
//! bit-identical results wherever it is applied.
//!
//! Recurrences (elementwise, `g` the gradient, `lr` the learning rate):
//!
//! * SGD: `w <- w - lr * g`
//! * Adagrad: `a <- a + g * g; w <- w - lr * g / sqrt(a)`, `a` starting at the
//!   configured initial accumulator. No epsilon: the accumulator is expected
//!   to start strictly positive.
//! * Momentum (classical): `m <- mu * m + g; w <- w - lr * m`, `m` starting at 0.

use indexmap::IndexMap;

use crate::config::{OptimizerKind, OptimizerSpec, TableId};
use crate::entry::EmbeddingEntry;
use crate::error::{Error, Result};
use crate::key::EmbeddingKey;

pub const ACCUMULATOR_SLOT: &str = "accumulator";
pub const MOMENTUM_SLOT: &str = "momentum";

/// Gradients for one table at one global step. Keys may repeat.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBatch {
    pub table: TableId,
    pub pairs: Vec<(EmbeddingKey, Vec<f32>)>,
    pub global_step: u64,
    pub learning_rate: f32,
}

/// Sums gradients of repeated keys, keeping keys in order of first occurrence.
pub fn aggregate_duplicates(pairs: Vec<(EmbeddingKey, Vec<f32>)>) -> Result<Vec<(EmbeddingKey, Vec<f32>)>> {
    let mut acc: IndexMap<EmbeddingKey, Vec<f32>> = IndexMap::with_capacity(pairs.len());
    for (key, grad) in pairs {
        match acc.get_mut(&key) {
            Some(sum) => {
                if sum.len() != grad.len() {
                    return Err(Error::DimensionMismatch {
                        expected: sum.len(),
                        got: grad.len(),
                    });
                }
                for (s, g) in sum.iter_mut().zip(&grad) {
                    *s += *g;
                }
            }
            None => {
                acc.insert(key, grad);
            }
        }
    }
    Ok(acc.into_iter().collect())
}

fn check_grad(entry: &EmbeddingEntry, grad: &[f32]) -> Result<()> {
    if grad.len() != entry.vector.len() {
        return Err(Error::DimensionMismatch {
            expected: entry.vector.len(),
            got: grad.len(),
        });
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteValue("gradient".into()));
    }
    Ok(())
}

fn check_finite(values: &[f32], what: &str) -> Result<()> {
    if values.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFiniteValue(what.to_string()));
    }
    Ok(())
}

fn step_sgd(entry: &mut EmbeddingEntry, grad: &[f32], lr: f32) -> Result<()> {
    check_grad(entry, grad)?;
    let next: Vec<f32> = entry.vector.iter().zip(grad).map(|(w, g)| w - lr * g).collect();
    check_finite(&next, "updated vector")?;
    entry.vector = next;
    Ok(())
}

fn step_adagrad(entry: &mut EmbeddingEntry, grad: &[f32], lr: f32, initial_accumulator: f32) -> Result<()> {
    check_grad(entry, grad)?;
    let dim = entry.vector.len();
    let acc: Vec<f32> = match entry.slots.get(ACCUMULATOR_SLOT) {
        Some(a) if a.len() == dim => a.iter().zip(grad).map(|(a, g)| a + g * g).collect(),
        Some(a) => {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: a.len(),
            })
        }
        None => grad.iter().map(|g| initial_accumulator + g * g).collect(),
    };
    let next: Vec<f32> = entry
        .vector
        .iter()
        .zip(grad)
        .zip(&acc)
        .map(|((w, g), a)| w - lr * g / a.sqrt())
        .collect();
    check_finite(&next, "updated vector")?;
    check_finite(&acc, "accumulator")?;
    entry.vector = next;
    entry.slots.insert(ACCUMULATOR_SLOT.to_string(), acc);
    Ok(())
}

fn step_momentum(entry: &mut EmbeddingEntry, grad: &[f32], lr: f32, mu: f32) -> Result<()> {
    check_grad(entry, grad)?;
    let dim = entry.vector.len();
    let m: Vec<f32> = match entry.slots.get(MOMENTUM_SLOT) {
        Some(m) if m.len() == dim => m.iter().zip(grad).map(|(m, g)| mu * m + g).collect(),
        Some(m) => {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: m.len(),
            })
        }
        None => grad.iter().map(|g| mu * 0.0 + g).collect(),
    };
    let next: Vec<f32> = entry.vector.iter().zip(&m).map(|(w, m)| w - lr * m).collect();
    check_finite(&next, "updated vector")?;
    check_finite(&m, "momentum")?;
    entry.vector = next;
    entry.slots.insert(MOMENTUM_SLOT.to_string(), m);
    Ok(())
}

pub fn apply_sgd(entry: &mut EmbeddingEntry, grad: &[f32], lr: f32) -> Result<()> {
    step_sgd(entry, grad, lr)?;
    entry.frequency += 1;
    Ok(())
}

pub fn apply_adagrad(entry: &mut EmbeddingEntry, grad: &[f32], lr: f32, initial_accumulator: f32) -> Result<()> {
    step_adagrad(entry, grad, lr, initial_accumulator)?;
    entry.frequency += 1;
    Ok(())
}

pub fn apply_momentum(entry: &mut EmbeddingEntry, grad: &[f32], lr: f32, mu: f32) -> Result<()> {
    step_momentum(entry, grad, lr, mu)?;
    entry.frequency += 1;
    Ok(())
}

/// Applies the table's optimizer with the batch's learning rate.
///
/// `count_update` controls whether the step counts towards the entry's
/// frequency; `global_step` is recorded as the last update step either way.
/// On error the entry is left untouched.
pub fn apply_gradient(
    entry: &mut EmbeddingEntry,
    grad: &[f32],
    spec: &OptimizerSpec,
    lr: f32,
    count_update: bool,
    global_step: u64,
) -> Result<()> {
    if !(lr.is_finite() && lr > 0.0) {
        return Err(Error::InvalidArgument(format!("learning rate {lr} must be > 0")));
    }
    match spec.kind {
        OptimizerKind::Sgd => step_sgd(entry, grad, lr)?,
        OptimizerKind::Adagrad => step_adagrad(entry, grad, lr, spec.adagrad_initial_accumulator)?,
        OptimizerKind::Momentum => step_momentum(entry, grad, lr, spec.momentum_coefficient)?,
    }
    if count_update {
        entry.frequency += 1;
    }
    entry.last_update_step = global_step;
    Ok(())
}
