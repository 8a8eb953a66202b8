//! Asymptotic variances, Efron-Stein bounds, linearization residuals and
//! CLT-based intervals for empirical transport costs.
//!
//! The centered cost `W_2^2(P_n, Q)` behaves like the empirical mean of
//! `g(x) = ||x||^2 - 2 phi0(x)`, where `phi0` is the transport potential on
//! the side of `P`. Its `P`-variance is the limiting variance `sigma^2(P, Q)`.
//!
//! The limit theory behind the intervals assumes finite moments of order
//! `4 + delta` for both measures; nothing here checks that.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exact_ot::w2_exact;
use crate::measures::{
    dot, moment, pairwise_moment_estimates, sq_norm, DiscreteMeasure, Measure, PairwiseMoments,
};
use crate::rng::SeedSpec;
use crate::semidiscrete::{psi_eval, PotentialVector, SemiDiscreteSolver};
use crate::stats::std_normal_quantile;

/// Plug-in variances at or below this are reported as degenerate.
pub const DEFAULT_DEGENERATE_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VarianceMethod {
    PotentialPlugin,
    ReplicationEmpirical,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceEstimate {
    pub sigma2: f64,
    pub method: VarianceMethod,
    /// Standard error; zero when the measure is a population rather than a sample.
    pub se: f64,
}

/// Weighted variance of `||x_i||^2 - 2 phi0_i` under the weights of `p`.
/// Zero-weight points are ignored, so their potential may be infinite.
pub fn sigma2_plugin(p: &DiscreteMeasure, phi0_at_points: &[f64]) -> Result<VarianceEstimate> {
    if phi0_at_points.len() != p.len() {
        return Err(Error::LengthMismatch {
            expected: p.len(),
            got: phi0_at_points.len(),
        });
    }
    let terms: Vec<(f64, f64)> = p
        .points()
        .zip(p.weights())
        .zip(phi0_at_points)
        .filter(|((_, w), _)| **w > 0.0)
        .map(|((x, w), phi)| (*w, sq_norm(x) - 2.0 * phi))
        .collect();
    if let Some(&(_, g)) = terms.iter().find(|(_, g)| !g.is_finite()) {
        return Err(Error::InvalidMeasure(format!("non-finite potential term {g}")));
    }
    // centering on the first term keeps constant shifts of phi0 exact
    let g0 = terms[0].1;
    let mean: f64 = terms.iter().map(|(w, g)| w * (g - g0)).sum();
    let var: f64 = terms.iter().map(|(w, g)| w * (g - g0 - mean).powi(2)).sum();
    let sigma2 = var.max(0.0);
    let se = match p.sample_size() {
        Some(n) => {
            let m4: f64 = terms.iter().map(|(w, g)| w * (g - g0 - mean).powi(4)).sum();
            ((m4 - sigma2 * sigma2).max(0.0) / n as f64).sqrt()
        }
        None => 0.0,
    };
    Ok(VarianceEstimate {
        sigma2,
        method: VarianceMethod::PotentialPlugin,
        se,
    })
}

/// Sample variance of replicated statistics, with the normal-theory standard error.
pub fn sigma2_replications(values: &[f64]) -> VarianceEstimate {
    let v = crate::stats::variance(values);
    let r = values.len() as f64;
    VarianceEstimate {
        sigma2: v,
        method: VarianceMethod::ReplicationEmpirical,
        se: if r > 1.0 { v * (2.0 / (r - 1.0)).sqrt() } else { f64::NAN },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EfronSteinComponents {
    pub m22: f64,
    pub m4: f64,
    pub q4: f64,
}

/// `C(P, Q) = 8 (m22 + sqrt(m4) sqrt(q4))`, bounding `n Var W_2^2(P_n, Q)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EfronSteinConstant {
    pub c_pq: f64,
    pub components: EfronSteinComponents,
    /// Monte Carlo standard error of `q4` (zero when exact).
    pub q4_se: f64,
    pub pairs: usize,
    pub subsampled: bool,
}

impl EfronSteinConstant {
    pub fn from_components(components: EfronSteinComponents) -> Self {
        let EfronSteinComponents { m22, m4, q4 } = components;
        EfronSteinConstant {
            c_pq: 8.0 * (m22 + m4.sqrt() * q4.sqrt()),
            components,
            q4_se: 0.0,
            pairs: 0,
            subsampled: false,
        }
    }
}

/// Estimates `C(P, Q)` from a sample of `P` and the fourth moment of `Q`.
pub fn efron_stein_constant(
    p_sample: &DiscreteMeasure,
    q: &Measure,
    mc: usize,
    seed: SeedSpec,
) -> Result<EfronSteinConstant> {
    if p_sample.dim() != q.dim() {
        return Err(Error::DimensionMismatch {
            left: p_sample.dim(),
            right: q.dim(),
        });
    }
    let PairwiseMoments {
        m22,
        m4,
        pairs,
        subsampled,
    } = pairwise_moment_estimates(p_sample)?;
    let q4 = moment(q, 4, mc, seed)?;
    let mut c = EfronSteinConstant::from_components(EfronSteinComponents {
        m22,
        m4,
        q4: q4.value,
    });
    c.q4_se = q4.se;
    c.pairs = pairs;
    c.subsampled = subsampled;
    Ok(c)
}

/// `W_2^2(P_n, Q) - sum_i w_i (||x_i||^2 - 2 phi0(x_i))` over the support of `p_n`.
pub fn residual_one_sample<F>(w2sq_pn_q: f64, p_n: &DiscreteMeasure, phi0: F) -> Result<f64>
where
    F: Fn(&[f64]) -> Option<f64>,
{
    Ok(w2sq_pn_q - linear_term(p_n, &phi0)?)
}

/// `W_2^2(P_n, Q_m)` minus the linear terms of both samples.
pub fn residual_two_sample<F, G>(
    w2sq: f64,
    p_n: &DiscreteMeasure,
    q_m: &DiscreteMeasure,
    phi0: F,
    psi0: G,
) -> Result<f64>
where
    F: Fn(&[f64]) -> Option<f64>,
    G: Fn(&[f64]) -> Option<f64>,
{
    Ok(w2sq - linear_term(p_n, &phi0)? - linear_term(q_m, &psi0)?)
}

/// `sum_i w_i (||x_i||^2 - 2 f(x_i))` over positive-weight points.
pub fn linear_term<F>(m: &DiscreteMeasure, f: &F) -> Result<f64>
where
    F: Fn(&[f64]) -> Option<f64>,
{
    let mut total = 0.0;
    for (x, &w) in m.points().zip(m.weights()) {
        if w == 0.0 {
            continue;
        }
        match f(x) {
            Some(v) if v.is_finite() => total += w * (sq_norm(x) - 2.0 * v),
            _ => return Err(Error::UndefinedPotential(x.to_vec())),
        }
    }
    Ok(total)
}

/// `phi0` of a finitely supported `P`: table lookup of `z` on the support.
pub fn table_potential<'a>(
    p: &'a DiscreteMeasure,
    z: &'a [f64],
) -> impl Fn(&[f64]) -> Option<f64> + 'a {
    move |x| p.find(x).map(|i| z[i]).filter(|v| v.is_finite())
}

/// `psi0(y) = max_j (x_j . y - z_j)`, the conjugate side of a semi-discrete solution.
pub fn laguerre_potential<'a>(
    p: &'a DiscreteMeasure,
    z: &'a [f64],
) -> impl Fn(&[f64]) -> Option<f64> + 'a {
    move |y| psi_eval(p, z, y).ok().map(|v| v.value)
}

/// Approximate convex conjugate `phi(x) = max_s (x . y_s - psi(y_s))` over a
/// finite grid of `y` points.
#[derive(Debug, Clone)]
pub struct GridConjugate {
    dim: usize,
    grid: Vec<f64>,
    psi: Vec<f64>,
}

impl GridConjugate {
    pub fn new<F>(dim: usize, grid: Vec<f64>, psi: F) -> Result<Self>
    where
        F: Fn(&[f64]) -> Option<f64>,
    {
        if dim == 0 || grid.is_empty() || grid.len() % dim != 0 {
            return Err(Error::InvalidConfig("grid must hold at least one point of the given dimension".into()));
        }
        let psi = grid
            .chunks_exact(dim)
            .map(|y| psi(y).ok_or_else(|| Error::UndefinedPotential(y.to_vec())))
            .collect::<Result<Vec<f64>>>()?;
        Ok(GridConjugate { dim, grid, psi })
    }

    /// Number of grid points; the approximation error shrinks as it grows.
    pub fn resolution(&self) -> usize {
        self.psi.len()
    }

    pub fn eval(&self, x: &[f64]) -> Option<f64> {
        if x.len() != self.dim {
            return None;
        }
        self.grid
            .chunks_exact(self.dim)
            .zip(&self.psi)
            .map(|(y, p)| dot(x, y) - p)
            .reduce(f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Centering {
    EmpiricalMean,
    TrueW2sq,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CltReport {
    pub estimate: f64,
    pub centering: Centering,
    pub sigma2: VarianceEstimate,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma2_reverse: Option<VarianceEstimate>,
    /// Variance entering the interval: `sigma2` in the one-sample case,
    /// `(1 - lambda) sigma^2(P,Q) + lambda sigma^2(Q,P)` with two samples.
    pub sigma2_effective: f64,
    pub alpha: f64,
    pub ci: (f64, f64),
    pub half_width: f64,
    pub n: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    /// `n` or `nm / (n + m)`.
    pub n_effective: f64,
    /// Variance bound `C(P,Q)/n` (or `C(P,Q)/n + C(Q,P)/m`) when computed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub es_bound: Option<f64>,
    /// The effective variance is numerically zero and the interval collapses.
    pub degenerate: bool,
}

fn check_alpha(alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidConfig(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    Ok(std_normal_quantile(1.0 - alpha / 2.0))
}

/// Normal interval `estimate +- z_{1-alpha/2} sqrt(sigma2_effective / n_effective)`.
#[allow(clippy::too_many_arguments)]
fn interval(
    estimate: f64,
    centering: Centering,
    sigma2: VarianceEstimate,
    sigma2_reverse: Option<VarianceEstimate>,
    sigma2_effective: f64,
    alpha: f64,
    n: usize,
    m: Option<usize>,
    degenerate_tol: f64,
) -> Result<CltReport> {
    let zq = check_alpha(alpha)?;
    let n_effective = match m {
        Some(m) => (n as f64 * m as f64) / (n + m) as f64,
        None => n as f64,
    };
    let half_width = zq * (sigma2_effective / n_effective).sqrt();
    Ok(CltReport {
        estimate,
        centering,
        sigma2,
        sigma2_reverse,
        sigma2_effective,
        alpha,
        ci: (estimate - half_width, estimate + half_width),
        half_width,
        n,
        m,
        lambda: m.map(|m| n as f64 / (n + m) as f64),
        n_effective,
        es_bound: None,
        degenerate: sigma2_effective <= degenerate_tol,
    })
}

/// Frequencies of `sample` on the support of `p`, in `p`'s order.
pub fn frequencies_on_support(p: &DiscreteMeasure, sample: &DiscreteMeasure) -> Result<DiscreteMeasure> {
    let n = sample.count();
    let mut counts = vec![0usize; p.len()];
    for (x, w) in sample.points().zip(sample.weights()) {
        let i = p.find(x).ok_or_else(|| Error::UndefinedPotential(x.to_vec()))?;
        counts[i] += (w * n as f64).round() as usize;
    }
    DiscreteMeasure::from_counts(p.dim(), p.points_flat().to_vec(), &counts)
}

/// One-sample interval for `W_2^2(P, Q)` with finitely supported `P`.
///
/// `pot` is the population solution for `(P, Q)` from `solver`. The estimate
/// `W_2^2(P_n, Q)` comes from a warm-started re-solve at the sample
/// frequencies; `sigma^2` is the plug-in variance of `||x||^2 - 2 z*` under
/// those frequencies.
pub fn clt_one_sample(
    p: &DiscreteMeasure,
    solver: &SemiDiscreteSolver,
    sample: &DiscreteMeasure,
    pot: &PotentialVector,
    alpha: f64,
    warm_sgd_steps: usize,
) -> Result<CltReport> {
    if !pot.converged {
        return Err(Error::Refused(format!(
            "population potential did not converge (gradient {:.3e} > {:.3e})",
            pot.grad_norm, pot.grad_allowance
        )));
    }
    if pot.z.len() != p.len() {
        return Err(Error::LengthMismatch {
            expected: p.len(),
            got: pot.z.len(),
        });
    }
    let pn = frequencies_on_support(p, sample)?;
    let warm = solver.with_phases(warm_sgd_steps, false);
    let pot_n = warm.solve(&pn, Some(&pot.z))?;
    if !pot_n.converged {
        return Err(Error::NonConvergence(format!(
            "re-solve at sample frequencies: gradient {:.3e} > {:.3e}",
            pot_n.grad_norm, pot_n.grad_allowance
        )));
    }
    let estimate = solver.w2_on_pool(&pn, &pot_n.z)?.w2sq;
    let sigma2 = sigma2_plugin(&pn, &pot.z)?;
    interval(
        estimate,
        Centering::TrueW2sq,
        sigma2,
        None,
        sigma2.sigma2,
        alpha,
        sample.count(),
        None,
        DEFAULT_DEGENERATE_TOL,
    )
}

/// Two-sample interval around `W_2^2(P_n, Q_m)` (computed exactly) with
/// effective variance `(1 - lambda) sigma^2(P,Q) + lambda sigma^2(Q,P)`,
/// `lambda = n / (n + m)`. The interval targets `E W_2^2(P_n, Q_m)`.
pub fn clt_two_sample(
    p_n: &DiscreteMeasure,
    q_m: &DiscreteMeasure,
    sigma2_pq: VarianceEstimate,
    sigma2_qp: VarianceEstimate,
    alpha: f64,
) -> Result<CltReport> {
    let estimate = w2_exact(p_n, q_m)?.cost;
    two_sample_interval(estimate, p_n.count(), q_m.count(), sigma2_pq, sigma2_qp, alpha)
}

/// [`clt_two_sample`] for an already computed estimate.
pub fn two_sample_interval(
    estimate: f64,
    n: usize,
    m: usize,
    sigma2_pq: VarianceEstimate,
    sigma2_qp: VarianceEstimate,
    alpha: f64,
) -> Result<CltReport> {
    if n < 2 || m < 2 {
        return Err(Error::InvalidConfig(format!(
            "two-sample interval needs n, m >= 2, got {n} and {m}"
        )));
    }
    let lambda = n as f64 / (n + m) as f64;
    let eff = effective_variance(lambda, sigma2_pq.sigma2, sigma2_qp.sigma2);
    interval(
        estimate,
        Centering::EmpiricalMean,
        sigma2_pq,
        Some(sigma2_qp),
        eff,
        alpha,
        n,
        Some(m),
        DEFAULT_DEGENERATE_TOL,
    )
}

pub fn effective_variance(lambda: f64, sigma2_pq: f64, sigma2_qp: f64) -> f64 {
    (1.0 - lambda) * sigma2_pq + lambda * sigma2_qp
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(xs: &[f64]) -> DiscreteMeasure {
        DiscreteMeasure::uniform(xs.iter().map(|&x| vec![x]).collect()).unwrap()
    }

    fn population(xs: &[f64], ws: &[f64]) -> DiscreteMeasure {
        DiscreteMeasure::new(xs.iter().map(|&x| vec![x]).collect(), ws.to_vec()).unwrap()
    }

    #[test]
    fn sigma2_examples() {
        let d = DiscreteMeasure::dirac(vec![1.5, -2.0]).unwrap();
        assert_eq!(sigma2_plugin(&d, &[7.0]).unwrap().sigma2, 0.0);
        let sym = population(&[-1.0, 1.0], &[0.5, 0.5]);
        assert_eq!(sigma2_plugin(&sym, &[5.0 / 6.0, 5.0 / 6.0]).unwrap().sigma2, 0.0);
        let two = population(&[0.0, 2.0], &[0.5, 0.5]);
        for a in [-3.0, 0.0, 0.4, 11.0] {
            let s = sigma2_plugin(&two, &[a, a]).unwrap();
            assert!((s.sigma2 - 4.0).abs() < 1e-12);
            assert_eq!(s.se, 0.0);
        }
        assert!(matches!(
            sigma2_plugin(&two, &[0.0]),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn sigma2_ignores_zero_weight_points() {
        let p = population(&[0.0, 1.0, 2.0], &[0.5, 0.0, 0.5]);
        let s = sigma2_plugin(&p, &[0.0, f64::INFINITY, 0.0]).unwrap();
        assert!((s.sigma2 - 4.0).abs() < 1e-12);
    }

    #[test]
    fn efron_stein_examples() {
        let c = EfronSteinConstant::from_components(EfronSteinComponents {
            m22: 0.5,
            m4: 1.0,
            q4: 1.0,
        });
        assert_eq!(c.c_pq, 12.0);
        let same = DiscreteMeasure::empirical_flat(1, vec![0.3; 5]).unwrap();
        let q = Measure::Discrete(population(&[-1.0, 1.0], &[0.5, 0.5]));
        let c = efron_stein_constant(&same, &q, 1, SeedSpec::default()).unwrap();
        assert_eq!(c.c_pq, 0.0);
        let two = line(&[0.0, 1.0]);
        let c = efron_stein_constant(&two, &q, 1, SeedSpec::default()).unwrap();
        assert_eq!(c.c_pq, 12.0);
    }

    #[test]
    fn residual_examples() {
        let x = DiscreteMeasure::dirac(vec![1.0, 2.0]).unwrap();
        let phi = |_: &[f64]| Some(0.75);
        let r = residual_one_sample(3.0, &x, phi).unwrap();
        assert!((r - (3.0 - 5.0 + 1.5)).abs() < 1e-15);
        let missing = residual_one_sample(1.0, &x, |_: &[f64]| None);
        assert!(matches!(missing, Err(Error::UndefinedPotential(v)) if v == vec![1.0, 2.0]));
    }

    #[test]
    fn two_sample_single_points_is_dual_gap() {
        // R = 2 (phi(x) + psi(y) - x . y) for n = m = 1
        let p = population(&[-1.0, 1.0], &[0.5, 0.5]);
        let z = [5.0 / 6.0, 5.0 / 6.0];
        let (x, y) = (1.0, 0.3);
        let px = DiscreteMeasure::dirac(vec![x]).unwrap();
        let qy = DiscreteMeasure::dirac(vec![y]).unwrap();
        let r = residual_two_sample(
            (x - y) * (x - y),
            &px,
            &qy,
            table_potential(&p, &z),
            laguerre_potential(&p, &z),
        )
        .unwrap();
        let psi = psi_eval(&p, &z, &[y]).unwrap().value;
        assert!((r - 2.0 * (z[1] + psi - x * y)).abs() < 1e-12);
        assert!(r >= -1e-9);
    }

    #[test]
    fn grid_conjugate_recovers_affine_potential() {
        // psi(y) = y^2 / 2 has conjugate phi(x) = x^2 / 2
        let grid: Vec<f64> = (0..=2000).map(|i| -2.0 + 4.0 * i as f64 / 2000.0).collect();
        let g = GridConjugate::new(1, grid, |y| Some(0.5 * y[0] * y[0])).unwrap();
        assert_eq!(g.resolution(), 2001);
        for x in [-1.5, 0.0, 0.3, 1.9] {
            assert!((g.eval(&[x]).unwrap() - 0.5 * x * x).abs() < 1e-5);
        }
        assert!(g.eval(&[0.0, 1.0]).is_none());
    }

    #[test]
    fn interval_half_width() {
        let s = VarianceEstimate {
            sigma2: 4.0,
            method: VarianceMethod::PotentialPlugin,
            se: 0.0,
        };
        let r = interval(1.0, Centering::TrueW2sq, s, None, 4.0, 0.05, 400, None, 1e-4).unwrap();
        assert!((r.half_width - 0.196).abs() < 1e-4);
        assert!(!r.degenerate);
        let z = VarianceEstimate { sigma2: 0.0, ..s };
        let r = interval(1.0, Centering::TrueW2sq, z, None, 0.0, 0.05, 400, None, 1e-4).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.ci, (1.0, 1.0));
        assert!(interval(1.0, Centering::TrueW2sq, s, None, 4.0, 1.5, 400, None, 1e-4).is_err());
    }

    #[test]
    fn two_sample_weights() {
        let v = |s| VarianceEstimate {
            sigma2: s,
            method: VarianceMethod::PotentialPlugin,
            se: 0.0,
        };
        let r = two_sample_interval(0.5, 100, 100, v(1.0), v(3.0), 0.05).unwrap();
        assert_eq!(r.lambda, Some(0.5));
        assert!((r.sigma2_effective - 2.0).abs() < 1e-15);
        assert_eq!(r.n_effective, 50.0);
        let r = two_sample_interval(0.5, 30, 90, v(2.5), v(2.5), 0.05).unwrap();
        assert!((r.sigma2_effective - 2.5).abs() < 1e-15);
        let a = two_sample_interval(0.5, 30, 90, v(1.0), v(4.0), 0.05).unwrap();
        let b = two_sample_interval(0.5, 90, 30, v(4.0), v(1.0), 0.05).unwrap();
        assert!((a.lambda.unwrap() - (1.0 - b.lambda.unwrap())).abs() < 1e-15);
        assert!((a.sigma2_effective - b.sigma2_effective).abs() < 1e-12);
        assert!(two_sample_interval(0.5, 1, 90, v(1.0), v(1.0), 0.05).is_err());
    }
}
