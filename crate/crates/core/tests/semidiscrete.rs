use proptest::prelude::*;
use w2core::exact_ot::w2_exact;
use w2core::measures::{sample, DiscreteMeasure, SamplableMeasure};
use w2core::semidiscrete::{
    center_potentials, dual_objective, psi_eval, solve_semidiscrete, w2_semidiscrete, CenterMode,
    SemiDiscreteSolver, SolverConfig, NONNEG_TOL,
};
use w2core::SeedSpec;

fn line(xs: &[f64]) -> DiscreteMeasure {
    DiscreteMeasure::uniform(xs.iter().map(|&x| vec![x]).collect()).unwrap()
}

fn unif() -> SamplableMeasure {
    SamplableMeasure::uniform_box(vec![-1.0], vec![1.0]).unwrap()
}

fn seed(s: u64) -> SeedSpec {
    SeedSpec::new(s, 0)
}

#[test]
fn single_cell_gradient_is_zero() {
    let p = line(&[0.3]);
    let ev = dual_objective(&p, &[1.7], &unif(), 1000, seed(1)).unwrap();
    assert_eq!(ev.grad, vec![0.0]);
}

#[test]
fn symmetric_pair_objective_at_zero() {
    let p = line(&[-1.0, 1.0]);
    let mc = 100_000;
    let ev = dual_objective(&p, &[0.0, 0.0], &unif(), mc, seed(2)).unwrap();
    assert!((ev.value - 0.5).abs() <= 3.0 * ev.se, "{ev:?}");
    let tol = 3.0 * (0.25f64 / mc as f64).sqrt();
    assert!(ev.grad.iter().all(|g| g.abs() <= tol), "{:?}", ev.grad);
}

#[test]
fn objective_is_shift_invariant_bitwise() {
    let p = DiscreteMeasure::new(vec![vec![0.0], vec![2.0], vec![-1.5]], vec![0.25, 0.5, 0.25]).unwrap();
    let z = [0.125, -0.5, 0.75];
    let a = dual_objective(&p, &z, &unif(), 20_000, seed(3)).unwrap();
    for c in [1.0, -3.5, 1024.0] {
        let zc: Vec<f64> = z.iter().map(|v| v + c).collect();
        let b = dual_objective(&p, &zc, &unif(), 20_000, seed(3)).unwrap();
        assert_eq!(a.value.to_bits(), b.value.to_bits());
        assert_eq!(a.grad, b.grad);
    }
}

#[test]
fn delta_measure_normalization() {
    let p = line(&[0.5]);
    let pot = solve_semidiscrete(&p, &unif(), &SolverConfig::default()).unwrap();
    // M = 0.25 + 1/3
    let m = 0.25 + 1.0 / 3.0;
    assert!((pot.m_const - m).abs() < 1e-15);
    assert!((pot.z[0] - (m - 0.125)).abs() < 1e-12);
    assert!(pot.converged);
}

#[test]
fn symmetric_pair_normalized_potential() {
    let p = line(&[-1.0, 1.0]);
    let pot = solve_semidiscrete(&p, &unif(), &SolverConfig::default()).unwrap();
    assert!(pot.converged, "{pot:?}");
    assert!((pot.m_const - 4.0 / 3.0).abs() < 1e-15);
    for z in &pot.z {
        assert!((z - 5.0 / 6.0).abs() < 2e-3, "{:?}", pot.z);
    }
    let s: f64 = pot.z.iter().map(|z| 0.5 * (z + 0.5)).sum();
    assert!((s - pot.m_const).abs() <= 1e-6 * (1.0 + pot.m_const));
}

#[test]
fn remark_fixture_boundary_at_zero() {
    let eps = 0.1;
    let q = SamplableMeasure::piecewise_uniform(&[(-1.0 - eps, -eps), (eps, 1.0 + eps)]).unwrap();
    let p = line(&[-1.0, 1.0]);
    let pot = solve_semidiscrete(&p, &q, &SolverConfig::default()).unwrap();
    assert!(pot.converged);
    // boundary between the cells of -1 and +1 sits at (z_2 - z_1) / 2
    let boundary = 0.5 * (pot.z[1] - pot.z[0]);
    assert!(boundary.abs() <= 0.02, "boundary {boundary}");
    assert_eq!(psi_eval(&p, &pot.z, &[-0.05]).unwrap().cell.index, 0);
    assert_eq!(psi_eval(&p, &pot.z, &[0.05]).unwrap().cell.index, 1);
}

#[test]
fn two_point_value_against_analytic() {
    let p = line(&[0.0, 2.0]);
    let q = unif();
    let pot = solve_semidiscrete(&p, &q, &SolverConfig::default()).unwrap();
    assert!(pot.converged);
    let est = w2_semidiscrete(&p, &q, &pot, 1_000_000, seed(9)).unwrap();
    assert!((est.w2sq - 4.0 / 3.0).abs() <= 3.0 * est.se.max(1e-9) + 1e-3, "{est:?}");
}

#[test]
fn psi_examples() {
    let p = line(&[-1.0, 1.0]);
    let v = psi_eval(&p, &[0.0, 0.0], &[0.7]).unwrap();
    assert!((v.value - 0.7).abs() < 1e-15);
    assert_eq!(v.cell.index, 1);
    assert!((v.cell.margin - 1.4).abs() < 1e-15);
    assert_eq!(psi_eval(&p, &[0.0, 0.0], &[0.0]).unwrap().cell.index, 0);
    let one = line(&[2.0]);
    let v = psi_eval(&one, &[0.5], &[3.0]).unwrap();
    assert_eq!((v.value, v.cell.index), (5.5, 0));
}

#[test]
fn centering_examples() {
    let p = line(&[-1.0, 1.0]);
    let z = center_potentials(&[0.0, 0.0], &p, &CenterMode::PropNormalization { m: 4.0 / 3.0 }).unwrap();
    assert!(z.iter().all(|v| (v - 5.0 / 6.0).abs() < 1e-15));
    let again = center_potentials(&z, &p, &CenterMode::PropNormalization { m: 4.0 / 3.0 }).unwrap();
    assert!(again.iter().zip(&z).all(|(a, b)| (a - b).abs() < 1e-12));
    let base = [0.25, -1.0];
    let target: Vec<f64> = base.iter().map(|v| v + 3.0).collect();
    let out = center_potentials(&base, &p, &CenterMode::MatchReference(target.clone())).unwrap();
    assert_eq!(out, target);
}

#[test]
fn solution_matches_fine_discretization() {
    let p = DiscreteMeasure::new(vec![vec![0.0, 0.0], vec![1.0, 0.5], vec![-0.5, 1.0]], vec![0.5, 0.3, 0.2]).unwrap();
    let q = SamplableMeasure::uniform_box(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap();
    let pot = solve_semidiscrete(&p, &q, &SolverConfig::default()).unwrap();
    assert!(pot.converged, "{pot:?}");
    let est = w2_semidiscrete(&p, &q, &pot, 200_000, seed(5)).unwrap();
    let qn = sample(&q, 10_000, seed(6)).unwrap();
    let exact = w2_exact(&p, &qn).unwrap().cost;
    // discretization error of Q_N: sd of W2^2(P, Q_N) is about sd(h) / sqrt(N)
    let combined = (est.se.powi(2) + (est.se * (200_000f64 / 10_000.0).sqrt()).powi(2)).sqrt();
    assert!((est.w2sq - exact).abs() <= 5.0 * combined, "{} vs {exact} (se {combined})", est.w2sq);
}

#[test]
fn optimal_cell_masses_match_weights() {
    let p = DiscreteMeasure::new(vec![vec![0.0], vec![0.7], vec![2.0]], vec![0.2, 0.5, 0.3]).unwrap();
    let cfg = SolverConfig::default();
    let pot = solve_semidiscrete(&p, &unif(), &cfg).unwrap();
    assert!(pot.converged);
    let mc = 200_000;
    let ev = dual_objective(&p, &pot.z, &unif(), mc, seed(77)).unwrap();
    for (j, g) in ev.grad.iter().enumerate() {
        let w = p.weights()[j];
        let band = 3.0 * (w * (1.0 - w) / mc as f64).sqrt() + cfg.tol_grad;
        assert!(g.abs() <= band + 1.5e-3, "cell {j}: {g}");
    }
}

#[test]
fn nonnegativity_after_normalization() {
    let p = DiscreteMeasure::new(vec![vec![3.0], vec![-0.5], vec![1.0]], vec![0.1, 0.6, 0.3]).unwrap();
    let pot = solve_semidiscrete(&p, &unif(), &SolverConfig::default()).unwrap();
    assert!(pot.nonneg_violation <= NONNEG_TOL);
    for (z, x) in pot.z.iter().zip(p.points()) {
        assert!(z + 0.5 * x[0] * x[0] >= -1e-6);
    }
}

#[test]
fn zero_weight_points_are_dropped() {
    let p = DiscreteMeasure::new(vec![vec![0.0], vec![5.0], vec![2.0]], vec![0.5, 0.0, 0.5]).unwrap();
    let pot = solve_semidiscrete(&p, &unif(), &SolverConfig::default()).unwrap();
    assert!(pot.z[1].is_infinite());
    let json = serde_json::to_value(&pot).unwrap();
    assert!(json["z"][1].is_null());
    assert_eq!(psi_eval(&p, &pot.z, &[0.9]).unwrap().cell.index, 2);
}

#[test]
fn warm_start_reuses_pools() {
    let p = line(&[0.0, 2.0]);
    let solver = SemiDiscreteSolver::new(unif(), SolverConfig::default()).unwrap();
    let star = solver.solve(&p, None).unwrap();
    let pn = DiscreteMeasure::new(vec![vec![0.0], vec![2.0]], vec![0.46, 0.54]).unwrap();
    let warm = solver.with_phases(1000, false).solve(&pn, Some(&star.z)).unwrap();
    assert!(warm.converged);
    // boundary b = 1 - 2 q with q the mass of the cell of x = 2
    let b = 0.5 * (warm.z[1] - warm.z[0]);
    assert!((b - (1.0 - 2.0 * 0.54)).abs() < 5e-3, "{b}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn gradient_sums_to_zero(z in prop::collection::vec(-2.0f64..2.0, 3), s in 0u64..1000) {
        let p = DiscreteMeasure::new(vec![vec![0.0], vec![1.0], vec![-1.0]], vec![0.2, 0.3, 0.5]).unwrap();
        let ev = dual_objective(&p, &z, &unif(), 2000, seed(s)).unwrap();
        let total: f64 = ev.grad.iter().sum();
        prop_assert_eq!(total, 0.0);
    }

    #[test]
    fn objective_is_convex_on_common_stream(
        za in prop::collection::vec(-1.0f64..1.0, 3),
        zb in prop::collection::vec(-1.0f64..1.0, 3),
        t in 0.05f64..0.95,
    ) {
        let p = DiscreteMeasure::new(vec![vec![0.0], vec![1.0], vec![-1.0]], vec![0.2, 0.3, 0.5]).unwrap();
        let zt: Vec<f64> = za.iter().zip(&zb).map(|(a, b)| t * a + (1.0 - t) * b).collect();
        let ev = |z: &[f64]| dual_objective(&p, z, &unif(), 20_000, seed(4)).unwrap();
        let (a, b, m) = (ev(&za), ev(&zb), ev(&zt));
        let se = (a.se.powi(2) + b.se.powi(2) + m.se.powi(2)).sqrt();
        prop_assert!(m.value <= t * a.value + (1.0 - t) * b.value + 4.0 * se);
    }

    #[test]
    fn minimum_respects_nonnegative_cost(x in prop::collection::vec(-2.0f64..2.0, 2)) {
        let p = DiscreteMeasure::new(vec![vec![x[0]], vec![x[1] + 4.5]], vec![0.5, 0.5]).unwrap();
        let cfg = SolverConfig { sgd_steps: 5000, saa_mc: 50_000, eval_mc: 50_000, ..SolverConfig::default() };
        let pot = solve_semidiscrete(&p, &unif(), &cfg).unwrap();
        let px2: f64 = p.points().zip(p.weights()).map(|(x, w)| w * x[0] * x[0]).sum();
        prop_assert!(pot.v_value <= 0.5 * (px2 + 1.0 / 3.0) + 3.0 * pot.v_se);
    }
}
