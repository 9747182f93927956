//! Cross-module checks: estimator against exact semigroups, heat kernel against the
//! exclusion generator, kernel design against the heat kernel, averaging identities.

use exvar_core::configspace::{chi, LocalFunction};
use exvar_core::exactgen::{apply_semigroup, build_generator, build_sep_generator, full_space, mask_weights, variance};
use exvar_core::fock::{chaos_coeffs, triple_norm};
use exvar_core::heatkernel::{heat_evolve, JumpKernel};
use exvar_core::homogenize::diffusion_matrix;
use exvar_core::lattice::{Point, Torus};
use exvar_core::mcsim::{regularize, EstimatorOptions, Horizon, Simulator, VarianceEstimator};
use exvar_core::rates::RateFamily;
use exvar_core::walkdesign::sep_for_diffusion;
use nalgebra::DMatrix;
use proptest::prelude::*;

fn p(x: i64) -> Point {
    Point::new(&[x])
}

#[test]
fn estimator_is_unbiased_over_seeds() {
    // mean of 200 seeded runs against the exact torus variance, pooled standard error
    let torus = Torus::new(1, 8).unwrap();
    let rf = RateFamily::neighbor_weighted(1, 0.5).unwrap();
    let u = LocalFunction::occupation(p(0)).mul(&LocalFunction::occupation(p(1))).unwrap();
    let rho = 0.4;
    let t = 0.75;
    let op = build_generator(&torus, &rf).unwrap();
    let w = mask_weights(&torus, rho).unwrap();
    let ft = apply_semigroup(&op, t, &full_space(&torus, &u).unwrap(), 1e-13).unwrap();
    let exact = variance(&w, &ft);
    let sim = Simulator::new(&torus, &rf).unwrap();
    let opts = EstimatorOptions { horizon: Horizon::Torus, ..Default::default() };
    let est = VarianceEstimator::new(sim, &u, rho, &[t], opts).unwrap();
    let runs: Vec<_> = (0..200).map(|s| est.run(60, 1000 + s).unwrap()[0]).collect();
    let mean = runs.iter().map(|e| e.estimate).sum::<f64>() / 200.0;
    let pooled = runs.iter().map(|e| e.stderr * e.stderr).sum::<f64>().sqrt() / 200.0;
    // the mean-product estimator carries an O(1/R) bias that is far below the pooled error here
    assert!((mean - exact).abs() < 3.0 * pooled, "{mean} vs {exact} ± {pooled}");
}

#[test]
fn ssep_level_one_is_the_heat_kernel() {
    // Var[P_t η_0] = χ Σ_x p_t(x)² with the single-particle walk of SSEP
    let torus = Torus::new(1, 12).unwrap();
    let rho = 0.3;
    let op = build_generator(&torus, &RateFamily::ssep(1)).unwrap();
    let w = mask_weights(&torus, rho).unwrap();
    let f = full_space(&torus, &LocalFunction::occupation(p(0))).unwrap();
    let q = JumpKernel::nearest_neighbor(1, 1.0);
    let mut delta = vec![0.0; 12];
    delta[0] = 1.0;
    for t in [0.3, 1.0, 2.5] {
        let exact = variance(&w, &apply_semigroup(&op, t, &f, 1e-14).unwrap());
        let pt = heat_evolve(&q, &torus, &delta, t).unwrap();
        let spectral = chi(rho) * pt.iter().map(|v| v * v).sum::<f64>();
        assert!((exact - spectral).abs() < 1e-12, "t = {t}: {exact} vs {spectral}");
    }
}

#[test]
fn matched_sep_has_the_target_diffusion() {
    let est = diffusion_matrix(&RateFamily::neighbor_weighted(1, 0.5).unwrap(), 0.5, 2).unwrap();
    let q = sep_for_diffusion(&est.matrix).unwrap();
    let cov = q.covariance();
    assert!((cov[(0, 0)] - 2.0 * est.matrix[(0, 0)]).abs() < 1e-12);
    // the walk of that kernel spreads with mean square displacement 2 D̄ t
    let torus = Torus::new(1, 600).unwrap();
    let mut f = vec![0.0; 600];
    f[0] = 1.0;
    let t = 20.0;
    let pt = heat_evolve(&q, &torus, &f, t).unwrap();
    let msd: f64 = pt
        .iter()
        .enumerate()
        .map(|(s, v)| {
            let x = torus.min_image(torus.coords(s)).coord(0) as f64;
            x * x * v
        })
        .sum();
    assert!((msd - 2.0 * est.matrix[(0, 0)] * t).abs() < 1e-8);
}

#[test]
fn sep_generator_matches_kernel_sum_on_level_one() {
    // L̄ η_0 = Σ_y Q_y (η_y − η_0) for a longer-range kernel
    let torus = Torus::new(1, 9).unwrap();
    let q = JumpKernel::new(1, [(p(1), 0.7), (p(-1), 0.7), (p(3), 0.2), (p(-3), 0.2)]).unwrap();
    let op = build_sep_generator(&torus, &q).unwrap();
    let f = full_space(&torus, &LocalFunction::occupation(p(0))).unwrap();
    let lf = op.apply_vec(&f);
    let expected = LocalFunction::occupation(p(1))
        .add(&LocalFunction::occupation(p(-1)))
        .scale(0.7)
        .add(&LocalFunction::occupation(p(3)).add(&LocalFunction::occupation(p(-3))).scale(0.2))
        .sub(&LocalFunction::occupation(p(0)).scale(1.8));
    let ef = full_space(&torus, &expected).unwrap();
    for (a, b) in lf.iter().zip(&ef) {
        assert!((a - b).abs() < 1e-14);
    }
}

#[test]
fn diffusion_estimate_is_symmetric_in_two_dimensions() {
    let est = diffusion_matrix(&RateFamily::neighbor_weighted(2, 0.3).unwrap(), 0.4, 1).unwrap();
    let m: &DMatrix<f64> = &est.matrix;
    assert!((m[(0, 1)] - m[(1, 0)]).abs() < 1e-14);
    assert!((m[(0, 0)] - m[(1, 1)]).abs() < 1e-9, "lattice symmetry: {m}");
    assert!(est.within_ellipticity(RateFamily::neighbor_weighted(2, 0.3).unwrap().lambda(), 1e-12));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn averaging_keeps_mean_and_contracts(
        vals in proptest::collection::vec(-1.0f64..1.0, 8),
        k in 0u32..6,
        rho in 0.05f64..0.95,
    ) {
        let sites = [p(0), p(1), p(3)];
        let u = LocalFunction::from_table(exvar_core::configspace::Table::new(sites.to_vec(), vals).unwrap());
        let r = regularize(&u, k, 1).unwrap();
        prop_assert!((r.expect_bernoulli(rho) - u.expect_bernoulli(rho)).abs() < 1e-12);
        let cu = chaos_coeffs(&u, rho).unwrap();
        let cr = chaos_coeffs(&r, rho).unwrap();
        for n in 1..=3 {
            prop_assert!(triple_norm(&cr, n) <= triple_norm(&cu, n) + 1e-12);
        }
        let supp = r.support();
        prop_assert_eq!(supp.first().copied(), Some(p(-(k as i64))));
        prop_assert_eq!(supp.last().copied(), Some(p(3 + k as i64)));
        prop_assert!(r.variance(rho).unwrap() <= u.variance(rho).unwrap() + 1e-12);
    }

    #[test]
    fn replicas_do_not_depend_on_order(seed in any::<u64>(), r in 0u64..1000) {
        let torus = Torus::new(1, 16).unwrap();
        let sim = Simulator::new(&torus, &RateFamily::neighbor_weighted(1, 0.25).unwrap()).unwrap();
        let u = LocalFunction::occupation(p(0));
        let est = VarianceEstimator::new(sim, &u, 0.5, &[0.5, 1.0], EstimatorOptions::default()).unwrap();
        let a = est.replica(seed, r).unwrap();
        let _ = est.replica(seed, r + 1).unwrap();
        prop_assert_eq!(a, est.replica(seed, r).unwrap());
    }
}
