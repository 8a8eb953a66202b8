//! Semi-discrete quadratic transport from a continuous `Q` to a finitely
//! supported `P = sum p_i delta_{x_i}`.
//!
//! The dual is the convex function
//! `V(z) = sum p_i z_i + E_Q max_j (x_j . Y - z_j)` with gradient
//! `p - (Q(A_1(z)), ..., Q(A_k(z)))`, where `A_j(z)` is the Laguerre cell on
//! which index `j` attains the maximum. Its minimizers differ by constants;
//! the normalized one satisfies `sum p_i (z_i + ||x_i||^2 / 2) = M` with
//! `M = max_i ||x_i||^2 + E||Y||^2`, and
//! `W_2^2(P, Q) = sum p_i ||x_i||^2 + E||Y||^2 - 2 min V`.
//!
//! Cell boundaries are `Q`-null when `Q` has a density; ties are broken towards
//! the lowest index so every evaluation is deterministic.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::measures::{
    dot, map_chunks, moment, sample_points, sq_norm, DiscreteMeasure, Measure, MomentEstimate,
    PointSampler, SamplableMeasure,
};
use crate::rng::{SeedSpec, CHUNK};

/// Dot products `x_j . y_s` are cached for the refinement pool up to this
/// many entries; larger problems recompute them.
const DOT_CACHE_MAX: usize = 25_000_000;

/// Allowed `nonneg_violation` of a normalized potential.
pub const NONNEG_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    /// `c` in the step size `c / sqrt(t + t0)`.
    pub step_scale: f64,
    /// `t0` in the step size.
    pub step_offset: f64,
    /// Averaged stochastic gradient steps.
    pub sgd_steps: usize,
    /// Draws per stochastic gradient.
    pub batch: usize,
    /// Size of the fixed sample-average refinement pool.
    pub saa_mc: usize,
    /// Maximum refinement sweeps over the coordinates.
    pub saa_iters: usize,
    /// Gradient tolerance in the sup norm.
    pub tol_grad: f64,
    /// Size of the independent evaluation batch.
    pub eval_mc: usize,
    /// Monte Carlo allowance, in standard errors, added to `tol_grad`.
    pub noise_sigmas: f64,
    /// Draws for `E||Y||^2` when the family has no closed form.
    pub moment_mc: usize,
    /// Return the starting point unchanged when its gradient is already
    /// within tolerance on the evaluation batch.
    pub early_exit: bool,
    pub seed: SeedSpec,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            step_scale: 1.0,
            step_offset: 100.0,
            sgd_steps: 100_000,
            batch: 1,
            saa_mc: 200_000,
            saa_iters: 500,
            tol_grad: 5e-4,
            eval_mc: 100_000,
            noise_sigmas: 4.0,
            moment_mc: 1_000_000,
            early_exit: true,
            seed: SeedSpec::default(),
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(format!("solver: {msg}")));
        if !(self.step_scale > 0.0 && self.step_scale.is_finite()) {
            return bad("step_scale must be positive");
        }
        if !(self.step_offset >= 0.0 && self.step_offset.is_finite()) {
            return bad("step_offset must be nonnegative");
        }
        if self.batch == 0 {
            return bad("batch must be at least 1");
        }
        if !(self.tol_grad > 0.0) {
            return bad("tol_grad must be positive");
        }
        if self.eval_mc == 0 {
            return bad("eval_mc must be at least 1");
        }
        if !(self.noise_sigmas >= 0.0 && self.noise_sigmas.is_finite()) {
            return bad("noise_sigmas must be nonnegative");
        }
        if self.moment_mc == 0 {
            return bad("moment_mc must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SolveDiagnostics {
    pub early_exit: bool,
    pub sgd_steps: usize,
    pub saa_sweeps: usize,
}

/// Semi-discrete dual weights aligned with the support of `P`.
///
/// Zero-weight support points have empty cells and carry `z = +inf`
/// (serialized as `null`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PotentialVector {
    #[serde(with = "nullable_vec")]
    pub z: Vec<f64>,
    pub normalized: bool,
    #[serde(rename = "M")]
    pub m_const: f64,
    /// Monte Carlo standard error of `M` (zero when `E||Y||^2` is exact).
    pub m_se: f64,
    pub v_value: f64,
    pub v_se: f64,
    pub grad_norm: f64,
    /// Threshold `grad_norm` was compared against.
    pub grad_allowance: f64,
    pub mc_samples: usize,
    pub converged: bool,
    /// `max(0, -min_i (z_i + ||x_i||^2 / 2))` after normalization; reported,
    /// never clipped. See [`NONNEG_TOL`].
    pub nonneg_violation: f64,
    pub diagnostics: SolveDiagnostics,
}

mod nullable_vec {
    use super::*;

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> std::result::Result<S::Ok, S::Error> {
        let opt: Vec<Option<f64>> = v.iter().map(|x| x.is_finite().then_some(*x)).collect();
        opt.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<f64>, D::Error> {
        let opt: Vec<Option<f64>> = Vec::deserialize(d)?;
        Ok(opt.into_iter().map(|x| x.unwrap_or(f64::INFINITY)).collect())
    }
}

/// Per-chunk accumulators of the evaluation kernel.
#[derive(Debug, Clone)]
struct Stats {
    n: usize,
    sum_max: f64,
    sum_max2: f64,
    sum_h: f64,
    sum_h2: f64,
    counts: Vec<usize>,
}

impl Stats {
    fn new(k: usize) -> Self {
        Stats {
            n: 0,
            sum_max: 0.0,
            sum_max2: 0.0,
            sum_h: 0.0,
            sum_h2: 0.0,
            counts: vec![0; k],
        }
    }

    fn merge(mut self, other: &Stats) -> Self {
        self.n += other.n;
        self.sum_max += other.sum_max;
        self.sum_max2 += other.sum_max2;
        self.sum_h += other.sum_h;
        self.sum_h2 += other.sum_h2;
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self
    }
}

fn mean_se(sum: f64, sum2: f64, n: usize) -> (f64, f64) {
    let nf = n as f64;
    let mean = sum / nf;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = ((sum2 - nf * mean * mean) / (nf - 1.0)).max(0.0);
    (mean, (var / nf).sqrt())
}

/// Best index and value of `x_j . y - z_j`, lowest index on ties.
#[inline]
fn best_cell(x: &[f64], d: usize, z: &[f64], y: &[f64]) -> (usize, f64) {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (j, xj) in x.chunks_exact(d).enumerate() {
        let v = dot(xj, y) - z[j];
        if v > best_v {
            best_v = v;
            best = j;
        }
    }
    (best, best_v)
}

fn chunk_stats(x: &[f64], d: usize, z: &[f64], ys: &[f64]) -> Stats {
    let mut st = Stats::new(z.len());
    for y in ys.chunks_exact(d) {
        let (j, m) = best_cell(x, d, z, y);
        let h = sq_norm(y) - 2.0 * m;
        st.n += 1;
        st.sum_max += m;
        st.sum_max2 += m * m;
        st.sum_h += h;
        st.sum_h2 += h * h;
        st.counts[j] += 1;
    }
    st
}

fn pool_stats(x: &[f64], d: usize, z: &[f64], pool: &[f64]) -> Stats {
    let parts: Vec<Stats> = pool
        .par_chunks(CHUNK * d)
        .map(|ys| chunk_stats(x, d, z, ys))
        .collect();
    parts.iter().fold(Stats::new(z.len()), |a, b| a.merge(b))
}

fn stream_stats<S: PointSampler + ?Sized>(
    q: &S,
    x: &[f64],
    z: &[f64],
    mc: usize,
    seed: SeedSpec,
) -> Stats {
    let d = q.dim();
    let parts = map_chunks(q, seed, mc, |ys| chunk_stats(x, d, z, ys));
    parts.iter().fold(Stats::new(z.len()), |a, b| a.merge(b))
}

/// Shifts `z` so that its first finite entry is zero; `V` is invariant.
fn shift_reference(z: &[f64]) -> Vec<f64> {
    let r = z.iter().copied().find(|v| v.is_finite()).unwrap_or(0.0);
    z.iter().map(|v| v - r).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualEvaluation {
    pub value: f64,
    pub grad: Vec<f64>,
    pub se: f64,
}

fn assemble(p: &DiscreteMeasure, zr: &[f64], st: &Stats) -> DualEvaluation {
    let (mean_max, se) = mean_se(st.sum_max, st.sum_max2, st.n);
    let lin: f64 = p
        .weights()
        .iter()
        .zip(zr)
        .filter(|(w, _)| **w > 0.0)
        .map(|(w, z)| w * z)
        .sum();
    let k = zr.len();
    let nf = st.n as f64;
    let mut grad: Vec<f64> = p
        .weights()
        .iter()
        .zip(&st.counts)
        .map(|(w, &c)| w - c as f64 / nf)
        .collect();
    let head: f64 = grad[..k - 1].iter().sum();
    grad[k - 1] = 0.0 - head;
    DualEvaluation {
        value: lin + mean_max,
        grad,
        se,
    }
}

fn check_dims(p: &DiscreteMeasure, z: &[f64], qdim: usize) -> Result<()> {
    if z.len() != p.len() {
        return Err(Error::LengthMismatch {
            expected: p.len(),
            got: z.len(),
        });
    }
    if p.dim() != qdim {
        return Err(Error::DimensionMismatch {
            left: p.dim(),
            right: qdim,
        });
    }
    Ok(())
}

/// Monte Carlo estimate of `V(z)` and its gradient from `mc` fresh draws of `Q`.
///
/// The estimate is computed at `z` shifted so its first finite entry is zero;
/// adding a constant to `z` is therefore bit-for-bit invariant whenever the
/// shifted vectors coincide exactly. The last gradient entry is set so the
/// entries sum to exactly zero in index order.
pub fn dual_objective<S: PointSampler + ?Sized>(
    p: &DiscreteMeasure,
    z: &[f64],
    q: &S,
    mc: usize,
    seed: SeedSpec,
) -> Result<DualEvaluation> {
    check_dims(p, z, q.dim())?;
    if mc == 0 {
        return Err(Error::InvalidConfig("mc must be at least 1".into()));
    }
    let zr = shift_reference(z);
    let st = stream_stats(q, p.points_flat(), &zr, mc, seed);
    Ok(assemble(p, &zr, &st))
}

/// Cell of a query point: the maximizing support index and its lead over the
/// runner-up.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LaguerreCell {
    pub index: usize,
    pub margin: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PsiValue {
    pub value: f64,
    pub cell: LaguerreCell,
}

/// `psi(y) = max_j (x_j . y - z_j)`, ties to the lowest index.
pub fn psi_eval(p: &DiscreteMeasure, z: &[f64], y: &[f64]) -> Result<PsiValue> {
    check_dims(p, z, y.len())?;
    let d = p.dim();
    let mut best = 0;
    let mut first = f64::NEG_INFINITY;
    let mut second = f64::NEG_INFINITY;
    for (j, xj) in p.points_flat().chunks_exact(d).enumerate() {
        let v = dot(xj, y) - z[j];
        if v > first {
            second = first;
            first = v;
            best = j;
        } else if v > second {
            second = v;
        }
    }
    let margin = if second == f64::NEG_INFINITY {
        f64::INFINITY
    } else {
        first - second
    };
    Ok(PsiValue {
        value: first,
        cell: LaguerreCell {
            index: best,
            margin,
        },
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum CenterMode {
    /// Add the constant making `sum p_i (z_i + ||x_i||^2 / 2) = m`.
    PropNormalization { m: f64 },
    /// Add the constant minimizing `sum p_i (z_i + a - z_ref_i)^2`.
    MatchReference(Vec<f64>),
}

/// Adds the constant selected by `mode` to every finite entry of `z`.
pub fn center_potentials(z: &[f64], p: &DiscreteMeasure, mode: &CenterMode) -> Result<Vec<f64>> {
    if z.len() != p.len() {
        return Err(Error::LengthMismatch {
            expected: p.len(),
            got: z.len(),
        });
    }
    let active = |i: usize| p.weights()[i] > 0.0;
    let a = match mode {
        CenterMode::PropNormalization { m } => {
            let s: f64 = (0..z.len())
                .filter(|&i| active(i))
                .map(|i| p.weights()[i] * (z[i] + 0.5 * sq_norm(p.point(i))))
                .sum();
            m - s
        }
        CenterMode::MatchReference(r) => {
            if r.len() != z.len() {
                return Err(Error::LengthMismatch {
                    expected: z.len(),
                    got: r.len(),
                });
            }
            (0..z.len())
                .filter(|&i| active(i))
                .map(|i| p.weights()[i] * (r[i] - z[i]))
                .sum()
        }
    };
    Ok(z.iter().map(|v| v + a).collect())
}

/// `max_i ||x_i||^2 + E||Y||^2` over the support points with positive weight.
pub fn normalization_constant(p: &DiscreteMeasure, second_moment_q: f64) -> f64 {
    let max_sq = p
        .active()
        .into_iter()
        .map(|i| sq_norm(p.point(i)))
        .fold(0.0, f64::max);
    max_sq + second_moment_q
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct W2Estimate {
    pub w2sq: f64,
    pub se: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

/// Solver bound to one continuous measure, holding the refinement and
/// evaluation pools so repeated solves share the same draws.
#[derive(Debug, Clone)]
pub struct SemiDiscreteSolver {
    q: SamplableMeasure,
    cfg: SolverConfig,
    saa_pool: Arc<Vec<f64>>,
    eval_pool: Arc<Vec<f64>>,
    m2: MomentEstimate,
}

impl SemiDiscreteSolver {
    pub fn new(q: SamplableMeasure, cfg: SolverConfig) -> Result<Self> {
        cfg.validate()?;
        let seed = cfg.seed;
        let saa_pool = Arc::new(sample_points(&q, seed.derive(1), 0, cfg.saa_mc));
        let eval_pool = Arc::new(sample_points(&q, seed.derive(2), 0, cfg.eval_mc));
        let m2 = moment(&Measure::Continuous(q.clone()), 2, cfg.moment_mc, seed.derive(4))?;
        Ok(SemiDiscreteSolver {
            q,
            cfg,
            saa_pool,
            eval_pool,
            m2,
        })
    }

    pub fn config(&self) -> &SolverConfig {
        &self.cfg
    }

    pub fn measure(&self) -> &SamplableMeasure {
        &self.q
    }

    /// `E||Y||^2` as used for `M`.
    pub fn second_moment(&self) -> MomentEstimate {
        self.m2
    }

    /// Same pools and measure with a different configuration for the
    /// optimization phases (pool sizes and seed are kept).
    pub fn with_phases(&self, sgd_steps: usize, early_exit: bool) -> Self {
        let mut s = self.clone();
        s.cfg.sgd_steps = sgd_steps;
        s.cfg.early_exit = early_exit;
        s
    }

    /// Solves for the normalized minimizer of `V`, optionally starting from
    /// `warm` (aligned with `p`'s support).
    pub fn solve(&self, p: &DiscreteMeasure, warm: Option<&[f64]>) -> Result<PotentialVector> {
        let d = self.q.dim();
        if p.dim() != d {
            return Err(Error::DimensionMismatch {
                left: p.dim(),
                right: d,
            });
        }
        let active = p.active();
        let k = active.len();
        let xa: Vec<f64> = active.iter().flat_map(|&i| p.point(i).to_vec()).collect();
        let pa: Vec<f64> = active.iter().map(|&i| p.weights()[i]).collect();
        let sq: Vec<f64> = active.iter().map(|&i| sq_norm(p.point(i))).collect();

        let mut z: Vec<f64> = match warm {
            Some(w) => {
                if w.len() != p.len() {
                    return Err(Error::LengthMismatch {
                        expected: p.len(),
                        got: w.len(),
                    });
                }
                let zs: Vec<f64> = active.iter().map(|&i| w[i]).collect();
                if zs.iter().any(|v| !v.is_finite()) {
                    return Err(Error::InvalidConfig(
                        "warm start must be finite on positive-weight points".into(),
                    ));
                }
                zs
            }
            None => {
                let mean_sq: f64 = pa.iter().zip(&sq).map(|(w, s)| w * s).sum();
                sq.iter().map(|s| 0.5 * s - 0.5 * mean_sq).collect()
            }
        };

        let cfg = &self.cfg;
        let eval_allow = |extra: f64| {
            let worst = pa.iter().map(|w| w * (1.0 - w)).fold(0.0, f64::max);
            cfg.tol_grad + cfg.noise_sigmas * (worst * (1.0 / cfg.eval_mc as f64 + extra)).sqrt()
        };

        let mut diag = SolveDiagnostics {
            early_exit: false,
            sgd_steps: 0,
            saa_sweeps: 0,
        };
        let mut used_saa = false;
        if k > 1 {
            let early = cfg.early_exit && {
                let st = pool_stats(&xa, d, &shift_reference(&z), &self.eval_pool);
                grad_norm(&pa, &st) <= eval_allow(0.0)
            };
            if early {
                diag.early_exit = true;
            } else {
                if cfg.sgd_steps > 0 {
                    z = self.sgd(&xa, &pa, z);
                    diag.sgd_steps = cfg.sgd_steps;
                }
                if cfg.saa_mc > 0 && cfg.saa_iters > 0 {
                    diag.saa_sweeps = self.refine(&xa, &pa, &mut z);
                    used_saa = true;
                }
            }
        }

        let m_const = self.m2.value + sq.iter().fold(0.0, |a: f64, &b| a.max(b));
        let s: f64 = pa.iter().zip(&z).zip(&sq).map(|((w, zi), s)| w * (zi + 0.5 * s)).sum();
        let shift = m_const - s;
        for v in z.iter_mut() {
            *v += shift;
        }
        let nonneg_violation = z
            .iter()
            .zip(&sq)
            .map(|(zi, s)| -(zi + 0.5 * s))
            .fold(0.0, f64::max);

        let zr = shift_reference(&z);
        let st = pool_stats(&xa, d, &zr, &self.eval_pool);
        let (mean_max, v_se) = mean_se(st.sum_max, st.sum_max2, st.n);
        let v_value = zr.iter().zip(&pa).map(|(a, w)| w * a).sum::<f64>() + mean_max;
        let gnorm = if k > 1 { grad_norm(&pa, &st) } else { 0.0 };
        let allowance = eval_allow(if used_saa {
            1.0 / cfg.saa_mc as f64
        } else {
            0.0
        });

        let mut full = vec![f64::INFINITY; p.len()];
        for (a, &i) in active.iter().enumerate() {
            full[i] = z[a];
        }
        Ok(PotentialVector {
            z: full,
            normalized: true,
            m_const,
            m_se: self.m2.se,
            v_value,
            v_se,
            grad_norm: gnorm,
            grad_allowance: allowance,
            mc_samples: cfg.eval_mc,
            converged: gnorm <= allowance,
            nonneg_violation,
            diagnostics: diag,
        })
    }

    /// Averaged stochastic gradient descent with step `c / sqrt(t + t0)`,
    /// returning the mean iterate over the second half.
    fn sgd(&self, xa: &[f64], pa: &[f64], mut z: Vec<f64>) -> Vec<f64> {
        let cfg = &self.cfg;
        let d = self.q.dim();
        let k = pa.len();
        let seed = cfg.seed.derive(3);
        let total = cfg.sgd_steps * cfg.batch;
        let half = cfg.sgd_steps / 2;
        let mut avg = vec![0.0; k];
        let mut n_avg = 0usize;
        let mut frac = vec![0.0; k];
        let mut buf: Vec<f64> = Vec::new();
        let mut buf_pos = 0usize;
        let mut drawn = 0usize;
        let inv_b = 1.0 / cfg.batch as f64;
        for t in 0..cfg.sgd_steps {
            frac.fill(0.0);
            for _ in 0..cfg.batch {
                if buf_pos * d >= buf.len() {
                    let take = CHUNK.min(total - drawn);
                    buf = sample_points(&self.q, seed, drawn, take);
                    drawn += take;
                    buf_pos = 0;
                }
                let y = &buf[buf_pos * d..(buf_pos + 1) * d];
                buf_pos += 1;
                let (j, _) = best_cell(xa, d, &z, y);
                frac[j] += inv_b;
            }
            let gamma = cfg.step_scale / (t as f64 + cfg.step_offset).sqrt();
            for j in 0..k {
                z[j] -= gamma * (pa[j] - frac[j]);
            }
            if t >= half {
                for j in 0..k {
                    avg[j] += z[j];
                }
                n_avg += 1;
            }
        }
        avg.iter().map(|a| a / n_avg as f64).collect()
    }

    /// Exact coordinate minimization of the sample-average dual on the fixed
    /// pool. Each coordinate is set so its cell holds `round(p_j N)` pool
    /// points; sweeps stop once every cell mass is within
    /// `max(tol_grad / 10, 2 / N)` of its target. Returns the sweep count.
    fn refine(&self, xa: &[f64], pa: &[f64], z: &mut [f64]) -> usize {
        let d = self.q.dim();
        let k = pa.len();
        let pool = &self.saa_pool;
        let n = pool.len() / d;
        let nf = n as f64;
        let stop = (self.cfg.tol_grad / 10.0).max(2.0 / nf);

        let cache: Option<Vec<f64>> = (n * k <= DOT_CACHE_MAX).then(|| {
            pool.par_chunks(d)
                .flat_map_iter(|y| xa.chunks_exact(d).map(move |x| dot(x, y)))
                .collect()
        });
        let g = |s: usize, j: usize| -> f64 {
            match &cache {
                Some(c) => c[s * k + j],
                None => dot(&xa[j * d..(j + 1) * d], &pool[s * d..(s + 1) * d]),
            }
        };

        let beats = |t: f64, j: usize, v: f64, i: usize| t > v || (t == v && j < i);
        let mut b1v = vec![f64::NEG_INFINITY; n];
        let mut b1i = vec![0usize; n];
        let mut b2v = vec![f64::NEG_INFINITY; n];
        let mut b2i = vec![usize::MAX; n];
        let top2 = |s: usize, z: &[f64]| -> (f64, usize, f64, usize) {
            let (mut v1, mut i1, mut v2, mut i2) = (f64::NEG_INFINITY, 0, f64::NEG_INFINITY, usize::MAX);
            for j in 0..k {
                let t = g(s, j) - z[j];
                if beats(t, j, v1, i1) || j == 0 {
                    if j > 0 {
                        v2 = v1;
                        i2 = i1;
                    }
                    v1 = t;
                    i1 = j;
                } else if beats(t, j, v2, i2) {
                    v2 = t;
                    i2 = j;
                }
            }
            (v1, i1, v2, i2)
        };
        let mut counts = vec![0usize; k];
        for s in 0..n {
            let (v1, i1, v2, i2) = top2(s, z);
            b1v[s] = v1;
            b1i[s] = i1;
            b2v[s] = v2;
            b2i[s] = i2;
            counts[i1] += 1;
        }

        let mut a = vec![0.0; n];
        let mut sweeps = 0;
        while sweeps < self.cfg.saa_iters {
            let worst = (0..k)
                .map(|j| (pa[j] - counts[j] as f64 / nf).abs())
                .fold(0.0, f64::max);
            if worst <= stop {
                break;
            }
            sweeps += 1;
            for j in 0..k {
                for s in 0..n {
                    let other = if b1i[s] == j { b2v[s] } else { b1v[s] };
                    a[s] = g(s, j) - other;
                }
                let target = ((pa[j] * nf).round() as usize).clamp(1, n);
                let zj = if target == n {
                    a.iter().copied().fold(f64::INFINITY, f64::min) - 1.0
                } else {
                    let (_, kth, rest) = a.select_nth_unstable_by(target - 1, |x, y| y.total_cmp(x));
                    let kth = *kth;
                    let next = rest.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    0.5 * (kth + next)
                };
                z[j] = zj;
                for s in 0..n {
                    let t = g(s, j) - zj;
                    let old = b1i[s];
                    if b1i[s] == j {
                        if beats(t, j, b2v[s], b2i[s]) {
                            b1v[s] = t;
                        } else {
                            let r = top2(s, z);
                            (b1v[s], b1i[s], b2v[s], b2i[s]) = r;
                        }
                    } else if b2i[s] == j {
                        if beats(t, j, b1v[s], b1i[s]) {
                            b2v[s] = b1v[s];
                            b2i[s] = b1i[s];
                            b1v[s] = t;
                            b1i[s] = j;
                        } else if t >= b2v[s] {
                            b2v[s] = t;
                        } else {
                            let r = top2(s, z);
                            (b1v[s], b1i[s], b2v[s], b2i[s]) = r;
                        }
                    } else if beats(t, j, b1v[s], b1i[s]) {
                        b2v[s] = b1v[s];
                        b2i[s] = b1i[s];
                        b1v[s] = t;
                        b1i[s] = j;
                    } else if beats(t, j, b2v[s], b2i[s]) {
                        b2v[s] = t;
                        b2i[s] = j;
                    }
                    if b1i[s] != old {
                        counts[old] -= 1;
                        counts[b1i[s]] += 1;
                    }
                }
            }
        }
        sweeps
    }

    /// `W_2^2(P, Q)` estimated on the solver's evaluation batch at `z`.
    /// Replications sharing a solver share this batch.
    pub fn w2_on_pool(&self, p: &DiscreteMeasure, z: &[f64]) -> Result<W2Estimate> {
        check_dims(p, z, self.q.dim())?;
        let zr = shift_reference(z);
        let st = pool_stats(p.points_flat(), p.dim(), &zr, &self.eval_pool);
        Ok(w2_from_stats(p, &zr, &st, self.m2))
    }
}

fn grad_norm(pa: &[f64], st: &Stats) -> f64 {
    let nf = st.n as f64;
    pa.iter()
        .zip(&st.counts)
        .map(|(w, &c)| (w - c as f64 / nf).abs())
        .fold(0.0, f64::max)
}

fn w2_from_stats(
    p: &DiscreteMeasure,
    zr: &[f64],
    st: &Stats,
    m2: MomentEstimate,
) -> W2Estimate {
    let px2: f64 = p.points().zip(p.weights()).map(|(x, w)| w * sq_norm(x)).sum();
    let lin: f64 = p
        .weights()
        .iter()
        .zip(zr)
        .filter(|(w, _)| **w > 0.0)
        .map(|(w, a)| w * a)
        .sum();
    if m2.exact {
        let (mean_max, se) = mean_se(st.sum_max, st.sum_max2, st.n);
        W2Estimate {
            w2sq: px2 + m2.value - 2.0 * (lin + mean_max),
            se: 2.0 * se,
            warning: None,
        }
    } else {
        let (mean_h, se) = mean_se(st.sum_h, st.sum_h2, st.n);
        W2Estimate {
            w2sq: px2 - 2.0 * lin + mean_h,
            se,
            warning: None,
        }
    }
}

/// `W_2^2(P, Q) = sum p_i ||x_i||^2 + E||Y||^2 - 2 V(z)` with `V` and, when
/// needed, `E||Y||^2` estimated from the same `mc` fresh draws.
pub fn w2_semidiscrete(
    p: &DiscreteMeasure,
    q: &SamplableMeasure,
    pot: &PotentialVector,
    mc: usize,
    seed: SeedSpec,
) -> Result<W2Estimate> {
    check_dims(p, &pot.z, q.dim())?;
    if mc == 0 {
        return Err(Error::InvalidConfig("mc must be at least 1".into()));
    }
    let zr = shift_reference(&pot.z);
    let st = stream_stats(q, p.points_flat(), &zr, mc, seed);
    let m2 = match q.closed_form_moment(2) {
        Some(value) => MomentEstimate {
            value,
            se: 0.0,
            exact: true,
        },
        None => MomentEstimate {
            value: f64::NAN,
            se: f64::NAN,
            exact: false,
        },
    };
    let mut est = w2_from_stats(p, &zr, &st, m2);
    if !pot.converged {
        est.warning = Some(format!(
            "potential did not converge (gradient {:.3e} > {:.3e})",
            pot.grad_norm, pot.grad_allowance
        ));
    }
    Ok(est)
}

/// Convenience wrapper: builds a solver for `q` and solves from the default start.
pub fn solve_semidiscrete(
    p: &DiscreteMeasure,
    q: &SamplableMeasure,
    cfg: &SolverConfig,
) -> Result<PotentialVector> {
    SemiDiscreteSolver::new(q.clone(), cfg.clone())?.solve(p, None)
}
