//! The reaction term: energy a cell discharges when neither residual vanishes.

use crate::error::{DynCellError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Reaction {
    /// `(u_i² + r_i²) / 2` per component.
    pub energy: Vec<f64>,
    /// `u_i · r_i` per component.
    pub product: Vec<f64>,
}

/// Combines the upstream residual `u` and the internal residual `r`.
///
/// Fails if `energy_i < product_i` for any component beyond rounding.
pub fn reaction(upstream: &[f64], internal: &[f64]) -> Result<Reaction> {
    if upstream.len() != internal.len() {
        return Err(DynCellError::SupportMismatch(format!(
            "residuals of length {} and {}",
            upstream.len(),
            internal.len()
        )));
    }
    let energy: Vec<f64> = upstream
        .iter()
        .zip(internal)
        .map(|(u, r)| (u * u + r * r) / 2.0)
        .collect();
    let product: Vec<f64> = upstream.iter().zip(internal).map(|(u, r)| u * r).collect();
    for (index, (&e, &p)) in energy.iter().zip(&product).enumerate() {
        if e < p - 4.0 * f64::EPSILON * e {
            return Err(DynCellError::InequalityViolated {
                index,
                energy: e,
                product: p,
            });
        }
    }
    Ok(Reaction { energy, product })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_residuals_give_zero_reaction() {
        let r = reaction(&[0.0; 3], &[0.0; 3]).unwrap();
        assert_eq!(r.energy, vec![0.0; 3]);
        assert_eq!(r.product, vec![0.0; 3]);
    }

    #[test]
    fn equal_residuals_are_the_tight_case() {
        let v = [0.5, -2.0, 3.25];
        let r = reaction(&v, &v).unwrap();
        for (i, x) in v.iter().enumerate() {
            assert_eq!(r.energy[i], x * x);
            assert_eq!(r.product[i], x * x);
        }
    }

    #[test]
    fn length_mismatch_is_an_error() {
        assert!(reaction(&[1.0], &[1.0, 2.0]).is_err());
    }
}
