use proptest::prelude::*;
use w2core::exact_ot::w2_exact;
use w2core::inference::{
    effective_variance, efron_stein_constant, residual_one_sample, residual_two_sample, sigma2_plugin,
    table_potential, two_sample_interval, EfronSteinComponents, EfronSteinConstant, VarianceEstimate,
    VarianceMethod,
};
use w2core::measures::{pairwise_moment_estimates, DiscreteMeasure, Measure};
use w2core::{stats, SeedSpec};

fn weighted(points: Vec<Vec<f64>>, raw: Vec<f64>) -> DiscreteMeasure {
    let dim = points[0].len();
    DiscreteMeasure::from_unnormalized(dim, points.concat(), raw).unwrap()
}

fn cloud(dim: usize) -> impl Strategy<Value = DiscreteMeasure> {
    prop::collection::vec((prop::collection::vec(-2.0f64..2.0, dim), 1u32..6), 2..6).prop_map(|pts| {
        let (points, raw): (Vec<_>, Vec<_>) = pts.into_iter().map(|(x, w)| (x, w as f64)).unzip();
        weighted(points, raw)
    })
}

fn estimate(sigma2: f64) -> VarianceEstimate {
    VarianceEstimate {
        sigma2,
        method: VarianceMethod::PotentialPlugin,
        se: 0.0,
    }
}

#[test]
fn residual_vanishes_at_the_population() {
    let p = weighted(vec![vec![0.0, 0.0], vec![1.0, 0.5], vec![-1.0, 2.0]], vec![1.0, 2.0, 3.0]);
    let q = weighted(vec![vec![0.3, 0.1], vec![2.0, -1.0]], vec![1.0, 1.0]);
    let sol = w2_exact(&p, &q).unwrap();
    let r = residual_two_sample(
        sol.cost,
        &p,
        &q,
        table_potential(&p, &sol.dual.phi),
        table_potential(&q, &sol.dual.psi),
    )
    .unwrap();
    assert!(r.abs() < 1e-9, "{r}");
}

#[test]
fn residual_is_small_against_fine_discretization() {
    // Q_N: midpoints of N cells of U(0, 1); P = {0.2, 0.9} with weights (0.5, 0.5)
    let n = 2000;
    let q = DiscreteMeasure::uniform((0..n).map(|i| vec![(i as f64 + 0.5) / n as f64]).collect()).unwrap();
    let p = DiscreteMeasure::new(vec![vec![0.2], vec![0.9]], vec![0.5, 0.5]).unwrap();
    let sol = w2_exact(&p, &q).unwrap();
    let pn = DiscreteMeasure::new(vec![vec![0.2], vec![0.9]], vec![0.52, 0.48]).unwrap();
    let w = w2_exact(&pn, &q).unwrap().cost;
    let phi = table_potential(&p, &sol.dual.phi);
    let r = residual_two_sample(w, &pn, &q, &phi, table_potential(&q, &sol.dual.psi)).unwrap();
    // the split point moves by 0.02 against a cost difference of slope 1.4,
    // leaving 1.4 * 0.02^2 / 2 = 2.8e-4 up to the cell width
    assert!((r - 2.8e-4).abs() < 2e-5, "{r}");
    // the one-sample residual differs only by the constant Q-side term
    let r1 = residual_one_sample(w, &pn, &phi).unwrap();
    let r1_pop = residual_one_sample(sol.cost, &p, &phi).unwrap();
    assert!(((r1 - r1_pop) - r).abs() < 1e-9);
}

#[test]
fn efron_stein_bound_covers_monte_carlo_variance() {
    let p = weighted(vec![vec![0.0], vec![1.0], vec![3.0]], vec![2.0, 1.0, 1.0]);
    let q = weighted(vec![vec![-1.0], vec![0.5], vec![2.0]], vec![1.0, 1.0, 1.0]);
    let n = 20;
    let stats_w: Vec<f64> = (0..2000)
        .map(|r| {
            let pn = p.sample_on_support(n, SeedSpec::new(41, r)).unwrap();
            w2_exact(&pn, &q).unwrap().cost
        })
        .collect();
    let scaled = n as f64 * stats::variance(&stats_w);
    let c = efron_stein_constant(&p, &Measure::Discrete(q), 0, SeedSpec::new(0, 0)).unwrap();
    assert!(scaled <= c.c_pq, "{scaled} > {}", c.c_pq);
}

#[test]
fn efron_stein_constant_against_hand_computation() {
    // P uniform on {0, 2}: E|X1-X2|^2 |X1|^2 = 1/4 * 4 * 4 = 4 (only X1 = 2, X2 = 0 counts)
    // and E|X1-X2|^4 = 1/2 * 16 = 8; Q = delta_1 has q4 = 1
    let p = DiscreteMeasure::new(vec![vec![0.0], vec![2.0]], vec![0.5, 0.5]).unwrap();
    let q = Measure::Discrete(DiscreteMeasure::dirac(vec![1.0]).unwrap());
    let c = efron_stein_constant(&p, &q, 0, SeedSpec::new(0, 0)).unwrap();
    assert!((c.components.m22 - 4.0).abs() < 1e-12);
    assert!((c.components.m4 - 8.0).abs() < 1e-12);
    assert!((c.c_pq - 8.0 * (4.0 + 8.0f64.sqrt())).abs() < 1e-12);
}

#[test]
fn two_sample_interval_is_symmetric_around_estimate() {
    let rep = two_sample_interval(0.7, 100, 300, estimate(2.0), estimate(1.0), 0.05).unwrap();
    let (lo, hi) = rep.ci;
    assert!(((hi - 0.7) - (0.7 - lo)).abs() < 1e-12);
    assert!((rep.sigma2_effective - effective_variance(0.25, 2.0, 1.0)).abs() < 1e-15);
    assert!(two_sample_interval(0.7, 1, 300, estimate(2.0), estimate(1.0), 0.05).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn resampled_residual_is_nonnegative(
        p in cloud(2),
        q in cloud(2),
        n in 1usize..12,
        m in 1usize..12,
        seed in 0u64..1000,
    ) {
        let sol = w2_exact(&p, &q).unwrap();
        let pn = p.sample_on_support(n, SeedSpec::new(seed, 0)).unwrap();
        let qm = q.sample_on_support(m, SeedSpec::new(seed, 1)).unwrap();
        let w = w2_exact(&pn, &qm).unwrap().cost;
        let r = residual_two_sample(
            w,
            &pn,
            &qm,
            table_potential(&p, &sol.dual.phi),
            table_potential(&q, &sol.dual.psi),
        )
        .unwrap();
        prop_assert!(r >= -1e-9, "{}", r);
    }

    #[test]
    fn es_constant_is_permutation_invariant_and_scales_quartically(
        pts in prop::collection::vec(-3.0f64..3.0, 2..30),
        s in 0.1f64..4.0,
    ) {
        let sample = DiscreteMeasure::empirical_flat(1, pts.clone()).unwrap();
        let mut rev = pts.clone();
        rev.reverse();
        let reversed = DiscreteMeasure::empirical_flat(1, rev).unwrap();
        let scaled = DiscreteMeasure::empirical_flat(1, pts.iter().map(|x| s * x).collect()).unwrap();
        let a = pairwise_moment_estimates(&sample).unwrap();
        let b = pairwise_moment_estimates(&reversed).unwrap();
        let c = pairwise_moment_estimates(&scaled).unwrap();
        let tol = 1e-9 * (1.0 + a.m4);
        prop_assert!((a.m22 - b.m22).abs() <= tol && (a.m4 - b.m4).abs() <= tol);
        let s4 = s.powi(4);
        prop_assert!((c.m22 - s4 * a.m22).abs() <= 1e-9 * (1.0 + c.m22));
        prop_assert!((c.m4 - s4 * a.m4).abs() <= 1e-9 * (1.0 + c.m4));
    }

    #[test]
    fn es_constant_is_monotone_in_q4(m22 in 0.0f64..10.0, m4 in 0.0f64..10.0, q4 in 0.0f64..10.0, dq in 0.0f64..5.0) {
        let lo = EfronSteinConstant::from_components(EfronSteinComponents { m22, m4, q4 });
        let hi = EfronSteinConstant::from_components(EfronSteinComponents { m22, m4, q4: q4 + dq });
        prop_assert!(hi.c_pq >= lo.c_pq);
    }

    #[test]
    fn effective_variance_is_a_convex_combination(lambda in 0.0f64..=1.0, a in 0.0f64..10.0, b in 0.0f64..10.0) {
        let e = effective_variance(lambda, a, b);
        prop_assert!(e >= a.min(b) - 1e-12 && e <= a.max(b) + 1e-12);
    }

    #[test]
    fn plugin_variance_ignores_potential_shift(p in cloud(2), c in -50.0f64..50.0) {
        let z: Vec<f64> = p.points().map(|x| x[0] - 0.3 * x[1]).collect();
        let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
        let a = sigma2_plugin(&p, &z).unwrap().sigma2;
        let b = sigma2_plugin(&p, &shifted).unwrap().sigma2;
        prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a));
    }
}
