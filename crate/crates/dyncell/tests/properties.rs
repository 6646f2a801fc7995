use dyncell::dist::{random_probs, unit_sphere_support};
use dyncell::{
    conditional, context_divergence, gradient_equivalence_check, internal_surprise, reaction, DiscreteDistribution,
    LinearCell, Quadratic,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn case(seed: u64, n: usize, dim: usize) -> (Vec<Vec<f32>>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (unit_sphere_support(n, dim, &mut rng), random_probs(n, &mut rng))
}

proptest! {
    #[test]
    fn conditional_is_normalized(seed in any::<u64>(), n in 1usize..80, c in prop::collection::vec(-20.0f64..20.0, 1..6)) {
        let (support, _) = case(seed, n, c.len());
        let p = conditional(&support, &c).unwrap();
        prop_assert!((p.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.probs().iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn surprise_is_nonnegative_and_expansion_holds(
        seed in any::<u64>(),
        n in 1usize..80,
        c in prop::collection::vec(-5.0f64..5.0, 1..6),
    ) {
        let (support, probs) = case(seed, n, c.len());
        let p = DiscreteDistribution::new(support, probs).unwrap();
        // internal_surprise errors if the two evaluation routes disagree beyond 1e-9.
        let s = internal_surprise(&p, &c).unwrap();
        prop_assert!(s >= 0.0);
    }

    #[test]
    fn context_divergence_matches_surrogate(
        seed in any::<u64>(),
        n in 1usize..80,
        pair in (1usize..6).prop_flat_map(|d| (prop::collection::vec(-5.0f64..5.0, d), prop::collection::vec(-5.0f64..5.0, d))),
    ) {
        let (support, _) = case(seed, n, pair.0.len());
        let d = context_divergence(&pair.0, &pair.1, &support).unwrap();
        prop_assert!(d.kl >= 0.0);
        prop_assert!((d.kl - d.surrogate).abs() <= 1e-9 * d.kl.abs().max(1.0));
    }

    #[test]
    fn reaction_inequality_holds(v in prop::collection::vec((-1e6f64..1e6, -1e6f64..1e6), 1..16)) {
        let (u, r): (Vec<f64>, Vec<f64>) = v.into_iter().unzip();
        let x = reaction(&u, &r).unwrap();
        for (e, p) in x.energy.iter().zip(&x.product) {
            prop_assert!(e >= p);
        }
    }

    #[test]
    fn linear_cell_reaction_matches_chain_rule(
        w in prop::collection::vec(-2.0f64..2.0, 12),
        a in prop::collection::vec(-2.0f64..2.0, 16),
        b in prop::collection::vec(-2.0f64..2.0, 4),
        c in prop::collection::vec(-2.0f64..2.0, 3),
    ) {
        let cell = LinearCell::new(w.chunks(3).map(<[f64]>::to_vec).collect());
        let q = Quadratic::new(a.chunks(4).map(<[f64]>::to_vec).collect(), b);
        let r = gradient_equivalence_check(&q, &cell, &c);
        let scale = r.analytic.iter().map(|x| x.abs()).fold(1.0, f64::max);
        prop_assert!(r.composed_vs_analytic_abs <= 1e-9 * scale);
        prop_assert!(r.composed_vs_fd_rel <= 1e-3 || r.composed_vs_analytic_abs <= 1e-6);
    }
}

#[test]
fn suite_passes_for_several_seeds_within_a_minute() {
    let started = std::time::Instant::now();
    for seed in [0, 1, 2] {
        for r in dyncell::verify::run_suite(seed) {
            assert!(r.passed, "seed {seed}: {} failed: {}", r.name, r.detail);
        }
    }
    assert!(started.elapsed().as_secs() < 60);
}
