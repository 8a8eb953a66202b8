//! Independent reference solvers for testing: exhaustive permutation search
//! and the one-dimensional quantile coupling.

use crate::error::{Error, Result};
use crate::measures::{sq_dist, DiscreteMeasure};

/// Largest instance accepted by [`w2_bruteforce`].
pub const BRUTEFORCE_MAX: usize = 9;

/// Minimum over all permutations `s` of `(1/n) sum ||x_i - y_s(i)||^2`.
pub fn w2_bruteforce(p: &DiscreteMeasure, q: &DiscreteMeasure) -> Result<f64> {
    if p.dim() != q.dim() {
        return Err(Error::DimensionMismatch {
            left: p.dim(),
            right: q.dim(),
        });
    }
    let n = p.len();
    if q.len() != n {
        return Err(Error::Refused(format!(
            "brute force needs equal support sizes, got {n} and {}",
            q.len()
        )));
    }
    if n > BRUTEFORCE_MAX {
        return Err(Error::Refused(format!(
            "brute force limited to n <= {BRUTEFORCE_MAX}, got {n}"
        )));
    }
    if !p.has_uniform_weights() || !q.has_uniform_weights() {
        return Err(Error::Refused("brute force needs uniform weights".into()));
    }
    let c: Vec<f64> = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .map(|(i, j)| sq_dist(p.point(i), q.point(j)))
        .collect();
    let total = |perm: &[usize]| -> f64 { perm.iter().enumerate().map(|(i, &j)| c[i * n + j]).sum() };

    // Heap's algorithm, iterative form
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = total(&perm);
    let mut ctr = vec![0usize; n];
    let mut i = 1;
    while i < n {
        if ctr[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(ctr[i], i);
            }
            best = best.min(total(&perm));
            ctr[i] += 1;
            i = 1;
        } else {
            ctr[i] = 0;
            i += 1;
        }
    }
    Ok(best / n as f64)
}

/// `W_2^2` between measures on the line by integrating the squared gap
/// between quantile functions over the merged weight breakpoints.
pub fn w2_1d(p: &DiscreteMeasure, q: &DiscreteMeasure) -> Result<f64> {
    for d in [p.dim(), q.dim()] {
        if d != 1 {
            return Err(Error::DimensionMismatch { left: 1, right: d });
        }
    }
    let sorted = |m: &DiscreteMeasure| {
        let mut v: Vec<(f64, f64)> = m
            .points_flat()
            .iter()
            .copied()
            .zip(m.weights().iter().copied())
            .filter(|&(_, w)| w > 0.0)
            .collect();
        v.sort_by(|a, b| a.0.total_cmp(&b.0));
        v
    };
    let (a, b) = (sorted(p), sorted(q));
    let (mut i, mut j) = (0, 0);
    let (mut ra, mut rb) = (a[0].1, b[0].1);
    let mut total = 0.0;
    while i < a.len() && j < b.len() {
        let mass = ra.min(rb);
        let gap = a[i].0 - b[j].0;
        total += mass * gap * gap;
        ra -= mass;
        rb -= mass;
        // the last atom on each side absorbs the rounding in the weight sums
        if ra <= 0.0 || (i + 1 < a.len() && ra < 1e-15) {
            i += 1;
            if i < a.len() {
                ra = a[i].1;
            }
        }
        if rb <= 0.0 || (j + 1 < b.len() && rb < 1e-15) {
            j += 1;
            if j < b.len() {
                rb = b[j].1;
            }
        }
    }
    Ok(total)
}
