//! The full property suite behind `dyncell-verify`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::dist::{conditional, random_probs, unit_sphere_support, DiscreteDistribution};
use crate::gradient::{gradient_equivalence_check, HalfSquaredNorm, LinearCell, Quadratic};
use crate::reaction::reaction;
use crate::saturation::saturation_sweep;
use crate::surprise::{
    context_divergence, internal_equilibrium_residual, internal_surprise, upstream_equilibrium_residual,
};
use crate::DEFAULT_SUPPORT_SIZE;

pub const RANDOM_TRIALS: usize = 200;
pub const REACTION_TRIALS: usize = 10_000;
pub const MC_DRAWS: usize = 1_000_000;
pub const GRADIENT_REL_TOL: f64 = 1e-3;
pub const FD_ABS_TOL: f64 = 1e-3;
pub const SATURATION_SEEDS: u64 = 5;
pub const SATURATION_DIMS: [usize; 3] = [2, 4, 8];
pub const SATURATION_COUNTS: [usize; 3] = [8, 32, 128];
pub const CONTEXT_BOUND: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, passed: bool, detail: String) -> CheckResult {
    CheckResult { name, passed, detail }
}

fn random_vec(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn random_case(rng: &mut impl Rng) -> (DiscreteDistribution, Vec<f64>) {
    let dim = rng.random_range(1..=8);
    let support = unit_sphere_support(DEFAULT_SUPPORT_SIZE, dim, rng);
    let probs = random_probs(DEFAULT_SUPPORT_SIZE, rng);
    let c = random_vec(dim, rng);
    (DiscreteDistribution::new(support, probs).expect("valid"), c)
}

/// Runs every check with randomness derived from `seed`.
pub fn run_suite(seed: u64) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    vec![
        kl_nonnegative(&mut rng),
        surprise_expansion(&mut rng),
        residual_gradient(&mut rng),
        upstream_monte_carlo(&mut rng),
        reaction_inequality(&mut rng),
        gradient_equivalence(&mut rng),
        divergence_identity(&mut rng),
        saturation(seed),
    ]
}

fn kl_nonnegative(rng: &mut impl Rng) -> CheckResult {
    let mut worst = f64::INFINITY;
    let mut zero_at_equal = 0.0f64;
    for _ in 0..RANDOM_TRIALS {
        let (p, c) = random_case(rng);
        match internal_surprise(&p, &c) {
            Ok(s) => worst = worst.min(s),
            Err(e) => return check("kl_nonnegative", false, e.to_string()),
        }
        let pc = conditional(p.support(), &c).expect("valid");
        zero_at_equal = zero_at_equal.max(internal_surprise(&pc, &c).map(f64::abs).unwrap_or(f64::INFINITY));
    }
    check(
        "kl_nonnegative",
        worst >= 0.0 && zero_at_equal <= 1e-9,
        format!("min surprise {worst:.3e}, max at equality {zero_at_equal:.3e}"),
    )
}

fn surprise_expansion(rng: &mut impl Rng) -> CheckResult {
    // internal_surprise fails on its own if the two evaluations differ by more than 1e-9.
    let failures: Vec<String> = (0..RANDOM_TRIALS)
        .filter_map(|_| {
            let (p, c) = random_case(rng);
            internal_surprise(&p, &c).err().map(|e| e.to_string())
        })
        .collect();
    check(
        "surprise_expansion_identity",
        failures.is_empty(),
        match failures.first() {
            Some(f) => format!("{} failures, first: {f}", failures.len()),
            None => format!("{RANDOM_TRIALS} random cases within 1e-9"),
        },
    )
}

fn residual_gradient(rng: &mut impl Rng) -> CheckResult {
    let h = crate::gradient::FD_STEP;
    let mut worst = 0.0f64;
    for _ in 0..RANDOM_TRIALS {
        let (p, c) = random_case(rng);
        let r = internal_equilibrium_residual(&p, &c).expect("valid");
        for d in 0..c.len() {
            let (mut up, mut dn) = (c.clone(), c.clone());
            up[d] += h;
            dn[d] -= h;
            let fd = (internal_surprise(&p, &up).unwrap() - internal_surprise(&p, &dn).unwrap()) / (2.0 * h);
            worst = worst.max((fd - r[d]).abs());
        }
    }
    check(
        "internal_residual_gradient",
        worst <= FD_ABS_TOL,
        format!("max |finite difference − residual| = {worst:.3e}"),
    )
}

fn upstream_monte_carlo(rng: &mut impl Rng) -> CheckResult {
    let dim = 3;
    let support = unit_sphere_support(16, dim, rng);
    let p_hat = DiscreteDistribution::new(support.clone(), random_probs(16, rng)).expect("valid");
    let p_w = DiscreteDistribution::new(support, random_probs(16, rng)).expect("valid");
    let exact = upstream_equilibrium_residual(&p_hat, &p_w).expect("valid");
    let mut ok = true;
    let mut worst_z = 0.0f64;
    for (d, &want) in exact.iter().enumerate() {
        let (mut s1, mut s2) = ([0.0f64; 2], [0.0f64; 2]);
        for _ in 0..MC_DRAWS {
            let a = p_hat.support()[p_hat.draw(rng)][d] as f64;
            let b = p_w.support()[p_w.draw(rng)][d] as f64;
            s1[0] += a;
            s1[1] += a * a;
            s2[0] += b;
            s2[1] += b * b;
        }
        let n = MC_DRAWS as f64;
        let (m1, m2) = (s1[0] / n, s2[0] / n);
        let var = (s1[1] / n - m1 * m1) / n + (s2[1] / n - m2 * m2) / n;
        let z = ((m1 - m2) - want).abs() / var.sqrt();
        worst_z = worst_z.max(z);
        ok &= z <= 3.0;
    }
    check(
        "upstream_residual_monte_carlo",
        ok,
        format!("{MC_DRAWS} draws, worst deviation {worst_z:.2} standard errors"),
    )
}

fn reaction_inequality(rng: &mut impl Rng) -> CheckResult {
    let mut failures = 0;
    let mut tightest = f64::INFINITY;
    for _ in 0..REACTION_TRIALS {
        let n = rng.random_range(1..=8);
        let u = random_vec(n, rng);
        let r = random_vec(n, rng);
        match reaction(&u, &r) {
            Ok(x) => {
                for (e, p) in x.energy.iter().zip(&x.product) {
                    tightest = tightest.min(e - p);
                }
            }
            Err(_) => failures += 1,
        }
    }
    check(
        "reaction_inequality",
        failures == 0 && tightest >= 0.0,
        format!("{REACTION_TRIALS} trials, {failures} violations, min slack {tightest:.3e}"),
    )
}

fn random_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    (0..rows).map(|_| random_vec(cols, rng)).collect()
}

fn gradient_equivalence(rng: &mut impl Rng) -> CheckResult {
    let c = random_vec(3, rng);
    let ident = gradient_equivalence_check(&HalfSquaredNorm, &LinearCell::identity(3), &c);
    let ident_err = crate::gradient::max_abs_diff(&ident.composed, &c);
    let zero = gradient_equivalence_check(&HalfSquaredNorm, &LinearCell::zeros(4, 3), &c);
    let zero_ok = zero.composed.iter().all(|&x| x == 0.0);
    let mut worst = 0.0f64;
    for _ in 0..RANDOM_TRIALS / 10 {
        let cell = LinearCell::new(random_matrix(4, 3, rng));
        let q = Quadratic::new(random_matrix(4, 4, rng), random_vec(4, rng));
        let c = random_vec(3, rng);
        let r = gradient_equivalence_check(&q, &cell, &c);
        let analytic = crate::gradient::relative_deviation(&r.composed, &r.analytic);
        worst = worst.max(r.worst_relative()).max(analytic);
        let sq = gradient_equivalence_check(&HalfSquaredNorm, &cell, &c);
        worst = worst
            .max(sq.worst_relative())
            .max(crate::gradient::relative_deviation(&sq.composed, &sq.analytic));
    }
    check(
        "reaction_is_gradient",
        ident_err <= 1e-4 && zero_ok && worst <= GRADIENT_REL_TOL,
        format!("identity error {ident_err:.3e}, zero map exact {zero_ok}, worst relative {worst:.3e}"),
    )
}

fn divergence_identity(rng: &mut impl Rng) -> CheckResult {
    let mut min = f64::INFINITY;
    for _ in 0..RANDOM_TRIALS {
        let dim = rng.random_range(1..=8);
        let support = unit_sphere_support(DEFAULT_SUPPORT_SIZE, dim, rng);
        let c1 = random_vec(dim, rng);
        let c2 = random_vec(dim, rng);
        match context_divergence(&c1, &c2, &support) {
            Ok(d) => min = min.min(d.kl),
            Err(e) => return check("context_divergence_identity", false, e.to_string()),
        }
    }
    check(
        "context_divergence_identity",
        min >= 0.0,
        format!("{RANDOM_TRIALS} pairs within 1e-9, min divergence {min:.3e}"),
    )
}

fn saturation(seed: u64) -> CheckResult {
    let seeds: Vec<u64> = (0..SATURATION_SEEDS).map(|i| seed.wrapping_add(i)).collect();
    match saturation_sweep(
        &SATURATION_DIMS,
        &SATURATION_COUNTS,
        DEFAULT_SUPPORT_SIZE,
        CONTEXT_BOUND,
        &seeds,
    ) {
        Ok(t) => check(
            "dimension_saturation_trend",
            t.decreases_with_count() && t.increases_with_dim(),
            format!("dims {:?} × counts {:?}: {:?}", t.dims, t.counts, t.mean_min),
        ),
        Err(e) => check("dimension_saturation_trend", false, e.to_string()),
    }
}
