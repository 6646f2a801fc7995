//! Numerical model of a cell whose state is a distribution over outcome
//! embeddings, `P(w|c) ∝ exp(⟨w, c⟩)` on a finite support.
//!
//! Provides surprise (KL) functionals, equilibrium residuals, the reaction
//! term, and checks that reaction reduces to the chain-rule gradient for
//! linear cells. Everything is computed in `f64`.

pub mod dist;
pub mod error;
pub mod gradient;
pub mod reaction;
pub mod saturation;
pub mod surprise;
pub mod verify;

pub use dist::{conditional, log_partition, DiscreteDistribution};
pub use error::{DynCellError, Result};
pub use gradient::{gradient_equivalence_check, GradientReport, HalfSquaredNorm, LinearCell, Loss, Quadratic};
pub use reaction::{reaction, Reaction};
pub use surprise::{
    context_divergence, internal_equilibrium_residual, internal_surprise, kl_divergence, upstream_equilibrium_residual,
    ContextDivergence,
};

/// Default number of outcomes in generated supports.
pub const DEFAULT_SUPPORT_SIZE: usize = 64;

/// Tolerance for closed-form identities evaluated two ways.
pub const IDENTITY_TOL: f64 = 1e-9;

pub(crate) fn dot(a: &[f32], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y).sum()
}
