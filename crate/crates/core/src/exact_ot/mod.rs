//! Exact transport between finitely supported measures under the squared
//! Euclidean cost.
//!
//! Solvers work on the cost form `min sum pi_ij ||x_i - y_j||^2` with duals
//! `u_i + v_j <= ||x_i - y_j||^2`. Results are reported in the inner-product
//! form: `phi_i = (||x_i||^2 - u_i) / 2`, `psi_j = (||y_j||^2 - v_j) / 2`, so that
//! `phi_i + psi_j >= x_i . y_j` and the dual value `sum w phi + sum v psi`
//! equals the maximal correlation `sum pi_ij x_i . y_j`.

mod assignment;
mod network_simplex;
mod oracles;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measures::{dot, sq_dist, sq_norm, DiscreteMeasure};

pub use oracles::{w2_1d, w2_bruteforce, BRUTEFORCE_MAX};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub i: usize,
    pub j: usize,
    pub mass: f64,
}

/// A coupling stored sparsely by support indices of the source and target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransportPlan {
    pub n: usize,
    pub m: usize,
    pub entries: Vec<PlanEntry>,
    /// `sum pi_ij ||x_i - y_j||^2`.
    pub cost: f64,
}

impl TransportPlan {
    pub fn row_sums(&self) -> Vec<f64> {
        let mut r = vec![0.0; self.n];
        for e in &self.entries {
            r[e.i] += e.mass;
        }
        r
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut c = vec![0.0; self.m];
        for e in &self.entries {
            c[e.j] += e.mass;
        }
        c
    }

    /// Largest deviation of a marginal from the given weights.
    pub fn marginal_error(&self, p: &DiscreteMeasure, q: &DiscreteMeasure) -> f64 {
        let (r, c) = (self.row_sums(), self.col_sums());
        let rows = r.iter().zip(p.weights()).map(|(a, b)| (a - b).abs());
        let cols = c.iter().zip(q.weights()).map(|(a, b)| (a - b).abs());
        rows.chain(cols).fold(0.0, f64::max)
    }

    pub fn recomputed_cost(&self, p: &DiscreteMeasure, q: &DiscreteMeasure) -> f64 {
        self.entries
            .iter()
            .map(|e| e.mass * sq_dist(p.point(e.i), q.point(e.j)))
            .sum()
    }

    /// `sum pi_ij x_i . y_j`.
    pub fn correlation(&self, p: &DiscreteMeasure, q: &DiscreteMeasure) -> f64 {
        self.entries
            .iter()
            .map(|e| e.mass * dot(p.point(e.i), q.point(e.j)))
            .sum()
    }
}

/// Inner-product form dual potentials on the two supports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualPair {
    pub phi: Vec<f64>,
    pub psi: Vec<f64>,
    /// `sum w_i phi_i + sum v_j psi_j`.
    pub value: f64,
}

impl DualPair {
    /// `max_ij (x_i . y_j - phi_i - psi_j)`; nonpositive for a feasible pair.
    pub fn max_violation(&self, p: &DiscreteMeasure, q: &DiscreteMeasure) -> f64 {
        let mut worst = f64::NEG_INFINITY;
        for (i, x) in p.points().enumerate() {
            for (j, y) in q.points().enumerate() {
                worst = worst.max(dot(x, y) - self.phi[i] - self.psi[j]);
            }
        }
        worst
    }

    /// The dual value translated to the cost form.
    pub fn cost_value(&self, p: &DiscreteMeasure, q: &DiscreteMeasure) -> f64 {
        second_moment(p) + second_moment(q) - 2.0 * self.value
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExactMethod {
    ClosedForm,
    Assignment,
    NetworkSimplex,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExactSolution {
    pub cost: f64,
    pub plan: TransportPlan,
    pub dual: DualPair,
    pub method: ExactMethod,
}

impl ExactSolution {
    /// `|primal cost - dual value|` in the cost form.
    pub fn duality_gap(&self, p: &DiscreteMeasure, q: &DiscreteMeasure) -> f64 {
        (self.cost - self.dual.cost_value(p, q)).abs()
    }
}

fn second_moment(m: &DiscreteMeasure) -> f64 {
    m.points().zip(m.weights()).map(|(x, w)| w * sq_norm(x)).sum()
}

/// `W_2^2(P, Q)` with an optimal plan and optimal dual potentials.
///
/// A single support point on either side is handled in closed form, equal
/// support sizes with uniform weights by the assignment solver, everything
/// else by the network simplex.
pub fn w2_exact(p: &DiscreteMeasure, q: &DiscreteMeasure) -> Result<ExactSolution> {
    solve_with(p, q, None)
}

/// Same as [`w2_exact`] but always uses the network simplex.
pub fn w2_network_simplex(p: &DiscreteMeasure, q: &DiscreteMeasure) -> Result<ExactSolution> {
    solve_with(p, q, Some(ExactMethod::NetworkSimplex))
}

fn solve_with(
    p: &DiscreteMeasure,
    q: &DiscreteMeasure,
    force: Option<ExactMethod>,
) -> Result<ExactSolution> {
    if p.dim() != q.dim() {
        return Err(Error::DimensionMismatch {
            left: p.dim(),
            right: q.dim(),
        });
    }
    let (n, m) = (p.len(), q.len());
    let cost: Vec<f64> = p
        .points()
        .flat_map(|x| q.points().map(move |y| sq_dist(x, y)))
        .collect();

    let rows = p.active();
    let cols = q.active();
    let (ra, ca) = (rows.len(), cols.len());
    let sub_cost = |i: usize, j: usize| cost[rows[i] * m + cols[j]];
    let (pw, qw) = (p.weights(), q.weights());

    let mut u = vec![0.0; n];
    let mut v = vec![0.0; m];
    let mut entries = Vec::new();

    let method = if force.is_none() && (ra == 1 || ca == 1) {
        if ra == 1 {
            let i = rows[0];
            for &j in &cols {
                entries.push(PlanEntry { i, j, mass: qw[j] });
                v[j] = cost[i * m + j];
            }
        } else {
            let j = cols[0];
            for &i in &rows {
                entries.push(PlanEntry { i, j, mass: pw[i] });
                u[i] = cost[i * m + j];
            }
        }
        ExactMethod::ClosedForm
    } else if force.is_none()
        && ra == ca
        && rows.iter().all(|&i| (pw[i] - pw[rows[0]]).abs() <= 1e-12)
        && cols.iter().all(|&j| (qw[j] - qw[cols[0]]).abs() <= 1e-12)
    {
        let sub: Vec<f64> = (0..ra)
            .flat_map(|i| (0..ca).map(move |j| (i, j)))
            .map(|(i, j)| sub_cost(i, j))
            .collect();
        let (assign, su, sv) = assignment::solve(ra, &sub);
        for (a, &b) in assign.iter().enumerate() {
            let (i, j) = (rows[a], cols[b]);
            entries.push(PlanEntry {
                i,
                j,
                mass: pw[i],
            });
        }
        for (a, &i) in rows.iter().enumerate() {
            u[i] = su[a];
        }
        for (b, &j) in cols.iter().enumerate() {
            v[j] = sv[b];
        }
        ExactMethod::Assignment
    } else {
        let sub: Vec<f64> = (0..ra)
            .flat_map(|i| (0..ca).map(move |j| (i, j)))
            .map(|(i, j)| sub_cost(i, j))
            .collect();
        let supply: Vec<f64> = rows.iter().map(|&i| pw[i]).collect();
        let demand: Vec<f64> = cols.iter().map(|&j| qw[j]).collect();
        let sol = network_simplex::solve(ra, ca, &sub, &supply, &demand)?;
        for (a, b, mass) in sol.flows {
            entries.push(PlanEntry {
                i: rows[a],
                j: cols[b],
                mass,
            });
        }
        for (a, &i) in rows.iter().enumerate() {
            u[i] = sol.u[a];
        }
        for (b, &j) in cols.iter().enumerate() {
            v[j] = sol.v[b];
        }
        ExactMethod::NetworkSimplex
    };

    // Double c-transform: v = u^c over the active rows, then u = v^c over
    // every column. Both steps keep optimality, the second makes the pair
    // feasible on the full supports, including zero-weight points.
    for j in 0..m {
        v[j] = rows
            .iter()
            .map(|&i| cost[i * m + j] - u[i])
            .fold(f64::INFINITY, f64::min);
    }
    for i in 0..n {
        u[i] = (0..m)
            .map(|j| cost[i * m + j] - v[j])
            .fold(f64::INFINITY, f64::min);
    }

    let plan_cost: f64 = entries.iter().map(|e| e.mass * cost[e.i * m + e.j]).sum();
    let phi: Vec<f64> = p.points().zip(&u).map(|(x, ui)| 0.5 * (sq_norm(x) - ui)).collect();
    let psi: Vec<f64> = q.points().zip(&v).map(|(y, vj)| 0.5 * (sq_norm(y) - vj)).collect();
    let value = phi.iter().zip(pw).map(|(a, w)| a * w).sum::<f64>()
        + psi.iter().zip(qw).map(|(b, w)| b * w).sum::<f64>();

    Ok(ExactSolution {
        cost: plan_cost,
        plan: TransportPlan {
            n,
            m,
            entries,
            cost: plan_cost,
        },
        dual: DualPair { phi, psi, value },
        method,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(xs: &[f64]) -> DiscreteMeasure {
        DiscreteMeasure::uniform(xs.iter().map(|&x| vec![x]).collect()).unwrap()
    }

    fn check(p: &DiscreteMeasure, q: &DiscreteMeasure, sol: &ExactSolution) {
        assert!(sol.plan.marginal_error(p, q) <= 1e-9);
        assert!((sol.plan.recomputed_cost(p, q) - sol.cost).abs() <= 1e-9);
        assert!(sol.plan.entries.len() < p.len() + q.len());
        assert!(sol.dual.max_violation(p, q) <= 1e-9);
        assert!(sol.duality_gap(p, q) <= 1e-7 * (1.0 + sol.cost.abs()));
    }

    #[test]
    fn diracs() {
        let (p, q) = (line(&[0.0]), line(&[1.0]));
        let sol = w2_exact(&p, &q).unwrap();
        assert_eq!(sol.cost, 1.0);
        assert_eq!(sol.plan.entries, vec![PlanEntry { i: 0, j: 0, mass: 1.0 }]);
        assert_eq!(sol.method, ExactMethod::ClosedForm);
        check(&p, &q, &sol);
    }

    #[test]
    fn identical_measures_cost_zero() {
        let p = DiscreteMeasure::new(
            vec![vec![0.0, 1.0], vec![2.0, -1.0], vec![0.5, 0.5]],
            vec![0.2, 0.3, 0.5],
        )
        .unwrap();
        let sol = w2_exact(&p, &p).unwrap();
        assert!(sol.cost.abs() < 1e-12);
        check(&p, &p, &sol);
    }

    #[test]
    fn dimension_mismatch() {
        let p = line(&[0.0]);
        let q = DiscreteMeasure::uniform(vec![vec![0.0, 1.0]]).unwrap();
        assert!(matches!(w2_exact(&p, &q), Err(Error::DimensionMismatch { left: 1, right: 2 })));
    }

    #[test]
    fn zero_weight_points_get_feasible_duals() {
        let p = DiscreteMeasure::new(vec![vec![0.0], vec![5.0], vec![1.0]], vec![0.5, 0.0, 0.5]).unwrap();
        let q = DiscreteMeasure::new(vec![vec![0.0], vec![-3.0], vec![2.0]], vec![0.25, 0.0, 0.75]).unwrap();
        let sol = w2_exact(&p, &q).unwrap();
        assert!((sol.cost - w2_1d(&p, &q).unwrap()).abs() < 1e-12);
        check(&p, &q, &sol);
    }

    #[test]
    fn assignment_and_simplex_agree() {
        let p = DiscreteMeasure::uniform(vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 2.0], vec![3.0, 1.0]]).unwrap();
        let q = DiscreteMeasure::uniform(vec![vec![0.5, 0.5], vec![-1.0, 0.0], vec![2.0, 2.0], vec![1.0, -1.0]]).unwrap();
        let a = w2_exact(&p, &q).unwrap();
        let b = w2_network_simplex(&p, &q).unwrap();
        assert_eq!(a.method, ExactMethod::Assignment);
        assert_eq!(b.method, ExactMethod::NetworkSimplex);
        assert!((a.cost - b.cost).abs() < 1e-12);
        assert!((a.cost - w2_bruteforce(&p, &q).unwrap()).abs() < 1e-12);
        check(&p, &q, &a);
        check(&p, &q, &b);
    }
}
