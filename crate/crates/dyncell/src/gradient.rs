//! Reaction of a linear cell reduces to the chain-rule gradient.
//!
//! For `w = W c` and a loss `L(w)`, the upstream residual is `∇L(w)`, the
//! internal residual is the Jacobian `∂w/∂c = W`, and their composition is
//! `Wᵀ ∇L(w) = ∂L/∂c`.

/// Central-difference step.
pub const FD_STEP: f64 = 1e-4;

/// A differentiable scalar loss of the cell output.
pub trait Loss {
    fn value(&self, w: &[f64]) -> f64;
    fn gradient(&self, w: &[f64]) -> Vec<f64>;
    /// `∂L(W c)/∂c` in closed form.
    fn input_gradient(&self, cell: &LinearCell, c: &[f64]) -> Vec<f64>;
}

/// `L(w) = |w|² / 2`.
#[derive(Debug, Clone, Copy, Default)]
pub struct HalfSquaredNorm;

impl Loss for HalfSquaredNorm {
    fn value(&self, w: &[f64]) -> f64 {
        w.iter().map(|x| x * x).sum::<f64>() / 2.0
    }

    fn gradient(&self, w: &[f64]) -> Vec<f64> {
        w.to_vec()
    }

    fn input_gradient(&self, cell: &LinearCell, c: &[f64]) -> Vec<f64> {
        // (WᵀW) c
        let gram = matmul(&transpose(&cell.weights), &cell.weights);
        matvec(&gram, c)
    }
}

/// `L(w) = wᵀ A w / 2 + bᵀ w` with symmetric `A`.
#[derive(Debug, Clone)]
pub struct Quadratic {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<f64>,
}

impl Quadratic {
    /// Symmetrizes `a`.
    pub fn new(a: Vec<Vec<f64>>, b: Vec<f64>) -> Self {
        let at = transpose(&a);
        let a = a
            .iter()
            .zip(&at)
            .map(|(r, rt)| r.iter().zip(rt).map(|(x, y)| (x + y) / 2.0).collect())
            .collect();
        Self { a, b }
    }
}

impl Loss for Quadratic {
    fn value(&self, w: &[f64]) -> f64 {
        let aw = matvec(&self.a, w);
        dot(w, &aw) / 2.0 + dot(&self.b, w)
    }

    fn gradient(&self, w: &[f64]) -> Vec<f64> {
        matvec(&self.a, w).iter().zip(&self.b).map(|(x, b)| x + b).collect()
    }

    fn input_gradient(&self, cell: &LinearCell, c: &[f64]) -> Vec<f64> {
        // (Wᵀ A W) c + Wᵀ b
        let wt = transpose(&cell.weights);
        let m = matmul(&matmul(&wt, &self.a), &cell.weights);
        let wb = matvec(&wt, &self.b);
        matvec(&m, c).iter().zip(&wb).map(|(x, y)| x + y).collect()
    }
}

/// `w = W c`, with `W` stored row-major as `out × in`.
#[derive(Debug, Clone)]
pub struct LinearCell {
    pub weights: Vec<Vec<f64>>,
}

impl LinearCell {
    pub fn new(weights: Vec<Vec<f64>>) -> Self {
        Self { weights }
    }

    pub fn identity(n: usize) -> Self {
        Self::new(
            (0..n)
                .map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect())
                .collect(),
        )
    }

    pub fn zeros(out: usize, input: usize) -> Self {
        Self::new(vec![vec![0.0; input]; out])
    }

    pub fn output(&self, c: &[f64]) -> Vec<f64> {
        matvec(&self.weights, c)
    }

    /// `∂w/∂c`.
    pub fn jacobian(&self) -> Vec<Vec<f64>> {
        self.weights.clone()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientReport {
    /// Upstream residual composed with the internal residual.
    pub composed: Vec<f64>,
    /// Closed-form `∂L/∂c`.
    pub analytic: Vec<f64>,
    pub composed_vs_analytic_abs: f64,
    /// Relative deviation of the upstream residual from a finite-difference `∂L/∂w`.
    pub upstream_vs_fd_rel: f64,
    /// Relative deviation of the Jacobian from finite differences of the cell.
    pub internal_vs_fd_rel: f64,
    /// Relative deviation of the composition from a finite-difference `∂L/∂c`.
    pub composed_vs_fd_rel: f64,
}

impl GradientReport {
    pub fn worst_relative(&self) -> f64 {
        self.upstream_vs_fd_rel
            .max(self.internal_vs_fd_rel)
            .max(self.composed_vs_fd_rel)
    }
}

/// Compares the composed reaction with the analytic gradient and with
/// central differences of step [`FD_STEP`].
pub fn gradient_equivalence_check(loss: &dyn Loss, cell: &LinearCell, c: &[f64]) -> GradientReport {
    let w = cell.output(c);
    let upstream = loss.gradient(&w);
    let internal = cell.jacobian();
    let composed: Vec<f64> = (0..c.len())
        .map(|j| upstream.iter().zip(&internal).map(|(u, row)| u * row[j]).sum())
        .collect();
    let analytic = loss.input_gradient(cell, c);

    let fd_w = central_difference(|x| loss.value(x), &w);
    let fd_c = central_difference(|x| loss.value(&cell.output(x)), c);
    // Column j of the Jacobian is ∂w/∂c_j.
    let mut fd_jac = vec![vec![0.0; c.len()]; w.len()];
    for j in 0..c.len() {
        let (mut up, mut dn) = (c.to_vec(), c.to_vec());
        up[j] += FD_STEP;
        dn[j] -= FD_STEP;
        let (wu, wd) = (cell.output(&up), cell.output(&dn));
        for i in 0..w.len() {
            fd_jac[i][j] = (wu[i] - wd[i]) / (2.0 * FD_STEP);
        }
    }

    GradientReport {
        composed_vs_analytic_abs: max_abs_diff(&composed, &analytic),
        upstream_vs_fd_rel: relative_deviation(&upstream, &fd_w),
        internal_vs_fd_rel: relative_deviation(&internal.concat(), &fd_jac.concat()),
        composed_vs_fd_rel: relative_deviation(&composed, &fd_c),
        composed,
        analytic,
    }
}

pub fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let (mut up, mut dn) = (x.to_vec(), x.to_vec());
            up[i] += FD_STEP;
            dn[i] -= FD_STEP;
            (f(&up) - f(&dn)) / (2.0 * FD_STEP)
        })
        .collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `max|a − b| / max|b|`, or 0 when both are zero.
pub fn relative_deviation(a: &[f64], b: &[f64]) -> f64 {
    let diff = max_abs_diff(a, b);
    if diff == 0.0 {
        return 0.0;
    }
    diff / b.iter().map(|x| x.abs()).fold(0.0, f64::max).max(1e-12)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn matvec(m: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    m.iter().map(|row| dot(row, v)).collect()
}

fn transpose(m: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let cols = m.first().map_or(0, Vec::len);
    (0..cols).map(|j| m.iter().map(|row| row[j]).collect()).collect()
}

fn matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let bt = transpose(b);
    a.iter()
        .map(|row| bt.iter().map(|col| dot(row, col)).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_cell_with_squared_norm_returns_the_input() {
        let c = [0.3, -1.2, 2.5];
        let r = gradient_equivalence_check(&HalfSquaredNorm, &LinearCell::identity(3), &c);
        for (x, y) in r.composed.iter().zip(c) {
            assert!((x - y).abs() < 1e-4);
        }
    }

    #[test]
    fn zero_cell_has_zero_input_gradient() {
        let q = Quadratic::new(vec![vec![2.0, 1.0], vec![0.0, 3.0]], vec![1.0, -1.0]);
        let r = gradient_equivalence_check(&q, &LinearCell::zeros(2, 3), &[1.0, 2.0, 3.0]);
        assert_eq!(r.composed, vec![0.0; 3]);
        assert_eq!(r.analytic, vec![0.0; 3]);
    }

    #[test]
    fn quadratic_is_symmetrized() {
        let q = Quadratic::new(vec![vec![1.0, 4.0], vec![0.0, 1.0]], vec![0.0, 0.0]);
        assert_eq!(q.a, vec![vec![1.0, 2.0], vec![2.0, 1.0]]);
    }
}
