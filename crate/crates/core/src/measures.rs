//! Probability measures: finitely supported measures, the built-in continuous
//! families, seeded sampling and moment estimation.
//!
//! The continuous reference measure of the semi-discrete problems is expected
//! to have a positive density on the interior of a convex support. All built-in
//! families satisfy this except `piecewise-uniform-1d` with gaps between its
//! intervals; for user-built configurations it is the caller's obligation.

use std::collections::HashMap;

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::rng::{chunk_spans, SeedSpec};

/// Tolerance on `|sum(weights) - 1|` for small supports; larger supports allow `4 k eps`.
pub const WEIGHT_SUM_TOL: f64 = 1e-12;

/// Default number of ordered pairs visited by the pairwise U-statistics.
pub const DEFAULT_PAIR_BUDGET: usize = 1_000_000;

/// Largest dimension accepted for built-in families; Gaussian families hold a
/// dense `dim x dim` factor.
pub const MAX_FAMILY_DIM: usize = 1024;

/// A finitely supported probability measure on `R^d`.
///
/// Support points are distinct: duplicates are merged at construction and
/// their weights added. Empirical measures remember how many raw draws they
/// were built from, which the pairwise U-statistics need.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteMeasure {
    dim: usize,
    points: Vec<f64>,
    weights: Vec<f64>,
    cum: Vec<f64>,
    sample_size: Option<usize>,
}

impl DiscreteMeasure {
    pub fn new(points: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        let (dim, flat) = flatten(points)?;
        Self::from_flat(dim, flat, weights)
    }

    pub fn from_flat(dim: usize, points: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        Self::build(dim, points, weights, None)
    }

    /// Uniform weights over the rows, remembered as an `n`-point sample.
    pub fn uniform(points: Vec<Vec<f64>>) -> Result<Self> {
        let (dim, flat) = flatten(points)?;
        Self::empirical_flat(dim, flat)
    }

    /// Empirical measure of `points.len() / dim` raw draws.
    pub fn empirical_flat(dim: usize, points: Vec<f64>) -> Result<Self> {
        if dim == 0 || points.is_empty() || points.len() % dim != 0 {
            return Err(Error::InvalidMeasure(format!(
                "{} coordinates cannot form points of dimension {dim}",
                points.len()
            )));
        }
        let n = points.len() / dim;
        let w = 1.0 / n as f64;
        Self::build(dim, points, vec![w; n], Some(n))
    }

    /// Measure on the given (distinct) support with weights `counts / total`.
    /// Zero counts are kept as zero-weight support points.
    pub fn from_counts(dim: usize, points: Vec<f64>, counts: &[usize]) -> Result<Self> {
        let total: usize = counts.iter().sum();
        if total == 0 {
            return Err(Error::InvalidMeasure("all counts are zero".into()));
        }
        let weights = counts.iter().map(|&c| c as f64 / total as f64).collect();
        Self::build(dim, points, weights, Some(total))
    }

    /// Normalizes nonnegative raw weights to sum to one.
    pub fn from_unnormalized(dim: usize, points: Vec<f64>, raw: Vec<f64>) -> Result<Self> {
        let total: f64 = raw.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::InvalidMeasure(format!(
                "weights must have a positive finite total, got {total}"
            )));
        }
        let weights = raw.into_iter().map(|w| w / total).collect();
        Self::build(dim, points, weights, None)
    }

    pub fn dirac(point: Vec<f64>) -> Result<Self> {
        Self::new(vec![point], vec![1.0])
    }

    fn build(
        dim: usize,
        points: Vec<f64>,
        weights: Vec<f64>,
        sample_size: Option<usize>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidMeasure("dimension must be at least 1".into()));
        }
        if points.len() % dim != 0 {
            return Err(Error::InvalidMeasure(format!(
                "{} coordinates cannot form points of dimension {dim}",
                points.len()
            )));
        }
        let k = points.len() / dim;
        if k == 0 {
            return Err(Error::InvalidMeasure("measure has no support points".into()));
        }
        if weights.len() != k {
            return Err(Error::LengthMismatch {
                expected: k,
                got: weights.len(),
            });
        }
        if let Some(v) = points.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidMeasure(format!("non-finite coordinate {v}")));
        }
        if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
            return Err(Error::InvalidMeasure(format!("invalid weight {w}")));
        }
        let total: f64 = weights.iter().sum();
        // rounding in the sum grows with the number of terms
        let tol = WEIGHT_SUM_TOL.max(4.0 * k as f64 * f64::EPSILON);
        if (total - 1.0).abs() > tol {
            return Err(Error::InvalidMeasure(format!(
                "weights sum to {total}, expected 1"
            )));
        }

        let mut index: HashMap<Vec<u64>, usize> = HashMap::with_capacity(k);
        let mut merged_points = Vec::with_capacity(points.len());
        let mut merged_weights = Vec::with_capacity(k);
        for (row, &w) in points.chunks_exact(dim).zip(&weights) {
            // +0.0 folds -0.0 onto 0.0 so both hash alike
            let key: Vec<u64> = row.iter().map(|v| (v + 0.0).to_bits()).collect();
            match index.get(&key) {
                Some(&i) => merged_weights[i] += w,
                None => {
                    index.insert(key, merged_weights.len());
                    merged_points.extend(row.iter().map(|v| v + 0.0));
                    merged_weights.push(w);
                }
            }
        }
        let cum = cumsum(&merged_weights);
        Ok(DiscreteMeasure {
            dim,
            points: merged_points,
            weights: merged_weights,
            cum,
            sample_size,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of distinct support points.
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points_flat(&self) -> &[f64] {
        &self.points
    }

    pub fn points(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.points.chunks_exact(self.dim)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn sample_size(&self) -> Option<usize> {
        self.sample_size
    }

    /// Effective number of observations: the raw sample size when known,
    /// otherwise the number of support points.
    pub fn count(&self) -> usize {
        self.sample_size.unwrap_or(self.len())
    }

    pub fn sq_norms(&self) -> Vec<f64> {
        self.points().map(sq_norm).collect()
    }

    /// Whether all weights agree within `1e-12`.
    pub fn has_uniform_weights(&self) -> bool {
        let w0 = self.weights[0];
        self.weights.iter().all(|w| (w - w0).abs() <= 1e-12)
    }

    /// Index of the support point equal to `x`, if any.
    pub fn find(&self, x: &[f64]) -> Option<usize> {
        if x.len() != self.dim {
            return None;
        }
        self.points().position(|p| p == x)
    }

    pub fn translated(&self, shift: &[f64]) -> Result<Self> {
        if shift.len() != self.dim {
            return Err(Error::DimensionMismatch {
                left: self.dim,
                right: shift.len(),
            });
        }
        let points = self
            .points
            .chunks_exact(self.dim)
            .flat_map(|p| p.iter().zip(shift).map(|(a, b)| a + b))
            .collect();
        Self::build(self.dim, points, self.weights.clone(), self.sample_size)
    }

    pub fn scaled(&self, s: f64) -> Result<Self> {
        let points = self.points.iter().map(|v| v * s).collect();
        Self::build(self.dim, points, self.weights.clone(), self.sample_size)
    }

    /// Support points with positive weight and their weights.
    pub(crate) fn active(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.weights[i] > 0.0).collect()
    }

    fn draw_index(&self, rng: &mut ChaCha8Rng) -> usize {
        let cum = &self.cum;
        let u: f64 = rng.random::<f64>() * cum[cum.len() - 1];
        cum.partition_point(|&c| c <= u).min(cum.len() - 1)
    }

    /// Multinomial counts of `n` draws, aligned with the support.
    pub fn sample_counts(&self, n: usize, seed: SeedSpec) -> Vec<usize> {
        let mut counts = vec![0usize; self.len()];
        for (chunk, offset, take) in chunk_spans(0, n) {
            let mut rng = seed.chunk_rng(chunk);
            for t in 0..offset + take {
                let i = self.draw_index(&mut rng);
                if t >= offset {
                    counts[i] += 1;
                }
            }
        }
        counts
    }

    /// Empirical measure of `n` draws, kept on this measure's support order
    /// (support points that were never drawn carry weight zero).
    pub fn sample_on_support(&self, n: usize, seed: SeedSpec) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidConfig("sample size must be at least 1".into()));
        }
        let counts = self.sample_counts(n, seed);
        Self::from_counts(self.dim, self.points.clone(), &counts)
    }
}

pub(crate) fn flatten(points: Vec<Vec<f64>>) -> Result<(usize, Vec<f64>)> {
    let dim = points
        .first()
        .map(|p| p.len())
        .ok_or_else(|| Error::InvalidMeasure("measure has no support points".into()))?;
    if dim == 0 {
        return Err(Error::InvalidMeasure("dimension must be at least 1".into()));
    }
    let mut flat = Vec::with_capacity(dim * points.len());
    for p in &points {
        if p.len() != dim {
            return Err(Error::DimensionMismatch {
                left: dim,
                right: p.len(),
            });
        }
        flat.extend_from_slice(p);
    }
    Ok((dim, flat))
}

#[inline]
pub fn sq_norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// JSON description of a built-in family:
/// `{"family": "gaussian", "dim": 2, "params": {"mean": [0, 0], "std": 1}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistributionConfig {
    pub family: String,
    pub dim: usize,
    #[serde(default)]
    pub params: Value,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FamilyKind {
    #[serde(rename = "uniform-box")]
    UniformBox,
    #[serde(rename = "gaussian")]
    Gaussian,
    #[serde(rename = "gaussian-mixture")]
    GaussianMixture,
    #[serde(rename = "uniform-ball")]
    UniformBall,
    #[serde(rename = "piecewise-uniform-1d")]
    PiecewiseUniform1d,
}

impl FamilyKind {
    pub fn name(self) -> &'static str {
        match self {
            FamilyKind::UniformBox => "uniform-box",
            FamilyKind::Gaussian => "gaussian",
            FamilyKind::GaussianMixture => "gaussian-mixture",
            FamilyKind::UniformBall => "uniform-ball",
            FamilyKind::PiecewiseUniform1d => "piecewise-uniform-1d",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "uniform-box" => FamilyKind::UniformBox,
            "gaussian" => FamilyKind::Gaussian,
            "gaussian-mixture" => FamilyKind::GaussianMixture,
            "uniform-ball" => FamilyKind::UniformBall,
            "piecewise-uniform-1d" => FamilyKind::PiecewiseUniform1d,
            other => return Err(Error::params(other, "unknown family")),
        })
    }
}

#[derive(Debug, Clone)]
struct Gaussian {
    mean: Vec<f64>,
    cov: Vec<f64>,
    chol: Vec<f64>,
}

impl Gaussian {
    fn from_params(family: &str, dim: usize, params: &Value) -> Result<Self> {
        let mean = vec_param(family, params, "mean", dim, Some(0.0))?;
        let cov = match (params.get("cov"), params.get("std")) {
            (Some(_), Some(_)) => {
                return Err(Error::params(family, "give either `cov` or `std`, not both"))
            }
            (Some(c), None) => matrix_param(family, c, dim)?,
            (None, s) => {
                let sd = match s {
                    None => 1.0,
                    Some(v) => v
                        .as_f64()
                        .ok_or_else(|| Error::params(family, "`std` must be a number"))?,
                };
                if !(sd > 0.0 && sd.is_finite()) {
                    return Err(Error::params(family, format!("std must be positive, got {sd}")));
                }
                let mut c = vec![0.0; dim * dim];
                for i in 0..dim {
                    c[i * dim + i] = sd * sd;
                }
                c
            }
        };
        for i in 0..dim {
            for j in 0..i {
                let (a, b) = (cov[i * dim + j], cov[j * dim + i]);
                if (a - b).abs() > 1e-12 * (1.0 + a.abs().max(b.abs())) {
                    return Err(Error::params(family, "covariance is not symmetric"));
                }
            }
        }
        let chol = DMatrix::from_row_slice(dim, dim, &cov)
            .cholesky()
            .ok_or_else(|| Error::params(family, "covariance is not positive definite"))?;
        let l = chol.l();
        let mut lower = vec![0.0; dim * dim];
        for i in 0..dim {
            for j in 0..=i {
                lower[i * dim + j] = l[(i, j)];
            }
        }
        Ok(Gaussian {
            mean,
            cov,
            chol: lower,
        })
    }

    fn draw(&self, rng: &mut ChaCha8Rng, out: &mut [f64]) {
        let d = self.mean.len();
        let mut z = [0.0f64; 16];
        let mut heap;
        let z: &mut [f64] = if d <= 16 {
            &mut z[..d]
        } else {
            heap = vec![0.0; d];
            &mut heap
        };
        for v in z.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        for i in 0..d {
            let row = &self.chol[i * d..i * d + i + 1];
            out[i] = self.mean[i] + dot(row, &z[..=i]);
        }
    }

    fn trace(&self) -> f64 {
        let d = self.mean.len();
        (0..d).map(|i| self.cov[i * d + i]).sum()
    }

    fn moment(&self, order: u32) -> f64 {
        let d = self.mean.len();
        let m2 = self.trace() + sq_norm(&self.mean);
        if order == 2 {
            return m2;
        }
        // E||Y||^4 = (tr S + |mu|^2)^2 + 2 tr(S^2) + 4 mu' S mu
        let mut tr_s2 = 0.0;
        let mut quad = 0.0;
        for i in 0..d {
            for j in 0..d {
                let c = self.cov[i * d + j];
                tr_s2 += c * self.cov[j * d + i];
                quad += self.mean[i] * c * self.mean[j];
            }
        }
        m2 * m2 + 2.0 * tr_s2 + 4.0 * quad
    }
}

#[derive(Debug, Clone)]
enum Family {
    UniformBox { low: Vec<f64>, high: Vec<f64> },
    Gaussian(Gaussian),
    GaussianMixture { cum: Vec<f64>, weights: Vec<f64>, parts: Vec<Gaussian> },
    UniformBall { center: Vec<f64>, radius: f64 },
    PiecewiseUniform1d { intervals: Vec<(f64, f64)>, weights: Vec<f64>, cum: Vec<f64> },
}

/// A continuous reference measure from one of the built-in families.
///
/// Uniqueness of transport potentials needs a positive density on the
/// interior of the convex support. Gapped `piecewise-uniform-1d` measures
/// violate it; callers are responsible for choosing a family that holds it.
#[derive(Debug, Clone)]
pub struct SamplableMeasure {
    config: DistributionConfig,
    kind: FamilyKind,
    family: Family,
}

impl SamplableMeasure {
    pub fn from_config(config: DistributionConfig) -> Result<Self> {
        let kind = FamilyKind::parse(&config.family)?;
        let name = kind.name();
        let dim = config.dim;
        if dim == 0 || dim > MAX_FAMILY_DIM {
            return Err(Error::params(
                name,
                format!("dim must lie in 1..={MAX_FAMILY_DIM}, got {dim}"),
            ));
        }
        let empty = Value::Object(Default::default());
        let params = if config.params.is_null() {
            &empty
        } else {
            &config.params
        };
        if !params.is_object() {
            return Err(Error::params(name, "params must be a JSON object"));
        }
        let family = match kind {
            FamilyKind::UniformBox => {
                let low = vec_param(name, params, "low", dim, Some(0.0))?;
                let high = vec_param(name, params, "high", dim, Some(1.0))?;
                if let Some(i) = (0..dim).find(|&i| !(low[i] < high[i])) {
                    return Err(Error::params(
                        name,
                        format!("need low < high in coordinate {i}"),
                    ));
                }
                Family::UniformBox { low, high }
            }
            FamilyKind::Gaussian => Family::Gaussian(Gaussian::from_params(name, dim, params)?),
            FamilyKind::GaussianMixture => {
                let comps = params
                    .get("components")
                    .and_then(Value::as_array)
                    .ok_or_else(|| Error::params(name, "`components` must be an array"))?;
                if comps.is_empty() {
                    return Err(Error::params(name, "need at least one component"));
                }
                let parts = comps
                    .iter()
                    .map(|c| Gaussian::from_params(name, dim, c))
                    .collect::<Result<Vec<_>>>()?;
                let raw = match params.get("weights") {
                    None => vec![1.0; parts.len()],
                    Some(w) => num_array(name, w, "weights")?,
                };
                let weights = normalize_weights(name, raw, parts.len())?;
                let cum = cumsum(&weights);
                Family::GaussianMixture {
                    cum,
                    weights,
                    parts,
                }
            }
            FamilyKind::UniformBall => {
                let center = vec_param(name, params, "center", dim, Some(0.0))?;
                let radius = params
                    .get("radius")
                    .map(|r| r.as_f64().ok_or_else(|| Error::params(name, "`radius` must be a number")))
                    .transpose()?
                    .unwrap_or(1.0);
                if !(radius > 0.0 && radius.is_finite()) {
                    return Err(Error::params(name, format!("radius must be positive, got {radius}")));
                }
                Family::UniformBall { center, radius }
            }
            FamilyKind::PiecewiseUniform1d => {
                if dim != 1 {
                    return Err(Error::params(name, format!("dim must be 1, got {dim}")));
                }
                let raw = params
                    .get("intervals")
                    .and_then(Value::as_array)
                    .ok_or_else(|| Error::params(name, "`intervals` must be an array of [a, b]"))?;
                let mut intervals = Vec::with_capacity(raw.len());
                for iv in raw {
                    let ab = num_array(name, iv, "intervals")?;
                    if ab.len() != 2 || !(ab[0] < ab[1]) {
                        return Err(Error::params(name, "each interval must be [a, b] with a < b"));
                    }
                    intervals.push((ab[0], ab[1]));
                }
                if intervals.is_empty() {
                    return Err(Error::params(name, "need at least one interval"));
                }
                if intervals.windows(2).any(|w| w[1].0 < w[0].1) {
                    return Err(Error::params(name, "intervals must be sorted and disjoint"));
                }
                let raw_w = match params.get("weights") {
                    None => intervals.iter().map(|(a, b)| b - a).collect(),
                    Some(w) => num_array(name, w, "weights")?,
                };
                let weights = normalize_weights(name, raw_w, intervals.len())?;
                let cum = cumsum(&weights);
                Family::PiecewiseUniform1d {
                    intervals,
                    weights,
                    cum,
                }
            }
        };
        Ok(SamplableMeasure {
            config,
            kind,
            family,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: DistributionConfig = serde_json::from_str(text)?;
        Self::from_config(config)
    }

    pub fn uniform_box(low: Vec<f64>, high: Vec<f64>) -> Result<Self> {
        Self::from_config(DistributionConfig {
            family: "uniform-box".into(),
            dim: low.len(),
            params: serde_json::json!({ "low": low, "high": high }),
        })
    }

    pub fn gaussian_iso(mean: Vec<f64>, std: f64) -> Result<Self> {
        Self::from_config(DistributionConfig {
            family: "gaussian".into(),
            dim: mean.len(),
            params: serde_json::json!({ "mean": mean, "std": std }),
        })
    }

    /// Uniform law on the union of intervals, weighted by length.
    pub fn piecewise_uniform(intervals: &[(f64, f64)]) -> Result<Self> {
        let iv: Vec<[f64; 2]> = intervals.iter().map(|&(a, b)| [a, b]).collect();
        Self::from_config(DistributionConfig {
            family: "piecewise-uniform-1d".into(),
            dim: 1,
            params: serde_json::json!({ "intervals": iv }),
        })
    }

    pub fn config(&self) -> &DistributionConfig {
        &self.config
    }

    pub fn kind(&self) -> FamilyKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    /// `E||Y||^order` in closed form, when the family has one.
    pub fn closed_form_moment(&self, order: u32) -> Option<f64> {
        if order != 2 && order != 4 {
            return None;
        }
        match &self.family {
            Family::UniformBox { low, high } => {
                let m2: Vec<f64> = low
                    .iter()
                    .zip(high)
                    .map(|(&a, &b)| power_mean(a, b, 2))
                    .collect();
                let s2: f64 = m2.iter().sum();
                if order == 2 {
                    return Some(s2);
                }
                let s4: f64 = low.iter().zip(high).map(|(&a, &b)| power_mean(a, b, 4)).sum();
                let sq: f64 = m2.iter().map(|v| v * v).sum();
                Some(s4 + s2 * s2 - sq)
            }
            Family::Gaussian(g) => Some(g.moment(order)),
            Family::GaussianMixture { weights, parts, .. } => Some(
                weights
                    .iter()
                    .zip(parts)
                    .map(|(w, g)| w * g.moment(order))
                    .sum(),
            ),
            Family::PiecewiseUniform1d {
                intervals, weights, ..
            } => Some(
                intervals
                    .iter()
                    .zip(weights)
                    .map(|(&(a, b), w)| w * power_mean(a, b, order))
                    .sum(),
            ),
            Family::UniformBall { .. } => None,
        }
    }
}

/// `E[U^k]` for `U` uniform on `(a, b)`.
fn power_mean(a: f64, b: f64, k: u32) -> f64 {
    let k1 = (k + 1) as i32;
    (b.powi(k1) - a.powi(k1)) / (k1 as f64 * (b - a))
}

fn cumsum(w: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    w.iter()
        .map(|v| {
            acc += v;
            acc
        })
        .collect()
}

fn num_array(family: &str, v: &Value, key: &str) -> Result<Vec<f64>> {
    let arr = v
        .as_array()
        .ok_or_else(|| Error::params(family, format!("`{key}` must be an array of numbers")))?;
    arr.iter()
        .map(|x| {
            x.as_f64()
                .filter(|f| f.is_finite())
                .ok_or_else(|| Error::params(family, format!("`{key}` must contain finite numbers")))
        })
        .collect()
}

fn vec_param(
    family: &str,
    params: &Value,
    key: &str,
    dim: usize,
    default: Option<f64>,
) -> Result<Vec<f64>> {
    match params.get(key) {
        None => default
            .map(|d| vec![d; dim])
            .ok_or_else(|| Error::params(family, format!("missing `{key}`"))),
        Some(Value::Number(n)) => {
            let v = n.as_f64().filter(|f| f.is_finite()).ok_or_else(|| {
                Error::params(family, format!("`{key}` must be finite"))
            })?;
            Ok(vec![v; dim])
        }
        Some(v) => {
            let out = num_array(family, v, key)?;
            if out.len() != dim {
                return Err(Error::params(
                    family,
                    format!("`{key}` has length {}, expected {dim}", out.len()),
                ));
            }
            Ok(out)
        }
    }
}

fn matrix_param(family: &str, v: &Value, dim: usize) -> Result<Vec<f64>> {
    let rows = v
        .as_array()
        .ok_or_else(|| Error::params(family, "`cov` must be a matrix (array of rows)"))?;
    if rows.len() != dim {
        return Err(Error::params(family, format!("`cov` must have {dim} rows")));
    }
    let mut out = Vec::with_capacity(dim * dim);
    for r in rows {
        let row = num_array(family, r, "cov")?;
        if row.len() != dim {
            return Err(Error::params(family, format!("`cov` rows must have length {dim}")));
        }
        out.extend(row);
    }
    Ok(out)
}

fn normalize_weights(family: &str, raw: Vec<f64>, expected: usize) -> Result<Vec<f64>> {
    if raw.len() != expected {
        return Err(Error::params(
            family,
            format!("`weights` has length {}, expected {expected}", raw.len()),
        ));
    }
    if raw.iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::params(family, "weights must be nonnegative"));
    }
    let total: f64 = raw.iter().sum();
    if !(total > 0.0) {
        return Err(Error::params(family, "weights must not all be zero"));
    }
    Ok(raw.into_iter().map(|w| w / total).collect())
}

/// Anything that can produce i.i.d. points from a seeded chunk generator.
pub trait PointSampler: Sync {
    fn dim(&self) -> usize;
    fn draw(&self, rng: &mut ChaCha8Rng, out: &mut [f64]);
}

impl PointSampler for SamplableMeasure {
    fn dim(&self) -> usize {
        self.config.dim
    }

    fn draw(&self, rng: &mut ChaCha8Rng, out: &mut [f64]) {
        match &self.family {
            Family::UniformBox { low, high } => {
                for ((o, a), b) in out.iter_mut().zip(low).zip(high) {
                    *o = a + (b - a) * rng.random::<f64>();
                }
            }
            Family::Gaussian(g) => g.draw(rng, out),
            Family::GaussianMixture { cum, parts, .. } => {
                let u: f64 = rng.random();
                let c = cum.partition_point(|&c| c <= u).min(parts.len() - 1);
                parts[c].draw(rng, out);
            }
            Family::UniformBall { center, radius } => {
                let d = center.len();
                let mut norm2 = 0.0;
                while norm2 == 0.0 {
                    norm2 = 0.0;
                    for o in out.iter_mut() {
                        *o = rng.sample(StandardNormal);
                        norm2 += *o * *o;
                    }
                }
                let r = radius * rng.random::<f64>().powf(1.0 / d as f64) / norm2.sqrt();
                for (o, c) in out.iter_mut().zip(center) {
                    *o = c + r * *o;
                }
            }
            Family::PiecewiseUniform1d { intervals, cum, .. } => {
                let u: f64 = rng.random();
                let i = cum.partition_point(|&c| c <= u).min(intervals.len() - 1);
                let (a, b) = intervals[i];
                out[0] = a + (b - a) * rng.random::<f64>();
            }
        }
    }
}

impl PointSampler for DiscreteMeasure {
    fn dim(&self) -> usize {
        self.dim
    }

    fn draw(&self, rng: &mut ChaCha8Rng, out: &mut [f64]) {
        let i = self.draw_index(rng);
        out.copy_from_slice(self.point(i));
    }
}

/// Either kind of measure, as accepted by configs and moment routines.
#[derive(Debug, Clone)]
pub enum Measure {
    Discrete(DiscreteMeasure),
    Continuous(SamplableMeasure),
}

impl Measure {
    pub fn dim(&self) -> usize {
        match self {
            Measure::Discrete(m) => m.dim(),
            Measure::Continuous(m) => m.dim(),
        }
    }

    pub fn as_discrete(&self) -> Option<&DiscreteMeasure> {
        match self {
            Measure::Discrete(m) => Some(m),
            Measure::Continuous(_) => None,
        }
    }

    pub fn as_continuous(&self) -> Option<&SamplableMeasure> {
        match self {
            Measure::Continuous(m) => Some(m),
            Measure::Discrete(_) => None,
        }
    }
}

impl PointSampler for Measure {
    fn dim(&self) -> usize {
        Measure::dim(self)
    }

    fn draw(&self, rng: &mut ChaCha8Rng, out: &mut [f64]) {
        match self {
            Measure::Discrete(m) => m.draw(rng, out),
            Measure::Continuous(m) => m.draw(rng, out),
        }
    }
}

/// Generates draws `start..start + count` as a flat row-major buffer.
/// The output depends only on `(seed, start, count)`, never on thread count.
pub fn sample_points<S: PointSampler + ?Sized>(
    sampler: &S,
    seed: SeedSpec,
    start: usize,
    count: usize,
) -> Vec<f64> {
    let d = sampler.dim();
    let parts: Vec<Vec<f64>> = chunk_spans(start, count)
        .into_par_iter()
        .map(|(chunk, offset, take)| draw_span(sampler, seed, chunk, offset, take))
        .collect();
    let mut out = Vec::with_capacity(count * d);
    for p in parts {
        out.extend(p);
    }
    out
}

fn draw_span<S: PointSampler + ?Sized>(
    sampler: &S,
    seed: SeedSpec,
    chunk: u64,
    offset: usize,
    take: usize,
) -> Vec<f64> {
    let d = sampler.dim();
    let mut rng = seed.chunk_rng(chunk);
    let mut scratch = vec![0.0; d];
    for _ in 0..offset {
        sampler.draw(&mut rng, &mut scratch);
    }
    let mut out = vec![0.0; take * d];
    for row in out.chunks_exact_mut(d) {
        sampler.draw(&mut rng, row);
    }
    out
}

/// Applies `f` to every chunk of draws `0..count` in parallel; results come
/// back in chunk order.
pub fn map_chunks<S, R, F>(sampler: &S, seed: SeedSpec, count: usize, f: F) -> Vec<R>
where
    S: PointSampler + ?Sized,
    R: Send,
    F: Fn(&[f64]) -> R + Sync,
{
    chunk_spans(0, count)
        .into_par_iter()
        .map(|(chunk, offset, take)| f(&draw_span(sampler, seed, chunk, offset, take)))
        .collect()
}

/// Draws `n` i.i.d. points and returns their empirical measure.
pub fn sample<S: PointSampler + ?Sized>(measure: &S, n: usize, seed: SeedSpec) -> Result<DiscreteMeasure> {
    if n == 0 {
        return Err(Error::InvalidConfig("sample size must be at least 1".into()));
    }
    DiscreteMeasure::empirical_flat(measure.dim(), sample_points(measure, seed, 0, n))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentEstimate {
    pub value: f64,
    /// Monte Carlo standard error; zero for exact values.
    pub se: f64,
    pub exact: bool,
}

/// `E||Y||^order` for `order` in {2, 4}: exact for finite measures and for
/// families with a closed form, Monte Carlo otherwise.
pub fn moment(measure: &Measure, order: u32, mc_samples: usize, seed: SeedSpec) -> Result<MomentEstimate> {
    if order != 2 && order != 4 {
        return Err(Error::InvalidConfig(format!("moment order must be 2 or 4, got {order}")));
    }
    match measure {
        Measure::Discrete(m) => {
            let value = m
                .points()
                .zip(m.weights())
                .map(|(x, w)| w * sq_norm(x).powi(order as i32 / 2))
                .sum();
            Ok(MomentEstimate {
                value,
                se: 0.0,
                exact: true,
            })
        }
        Measure::Continuous(m) => {
            if let Some(value) = m.closed_form_moment(order) {
                return Ok(MomentEstimate {
                    value,
                    se: 0.0,
                    exact: true,
                });
            }
            if mc_samples == 0 {
                return Err(Error::InvalidConfig(
                    "Monte Carlo moment needs at least one sample".into(),
                ));
            }
            let d = m.dim();
            let parts = map_chunks(m, seed, mc_samples, |pts| {
                let mut s = 0.0;
                let mut s2 = 0.0;
                for y in pts.chunks_exact(d) {
                    let v = sq_norm(y).powi(order as i32 / 2);
                    s += v;
                    s2 += v * v;
                }
                (s, s2)
            });
            let (s, s2) = parts.iter().fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
            let n = mc_samples as f64;
            let mean = s / n;
            let var = if mc_samples > 1 {
                ((s2 - n * mean * mean) / (n - 1.0)).max(0.0)
            } else {
                0.0
            };
            Ok(MomentEstimate {
                value: mean,
                se: (var / n).sqrt(),
                exact: false,
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairwiseMoments {
    /// Estimate of `E(||X1 - X2||^2 ||X1||^2)`.
    pub m22: f64,
    /// Estimate of `E||X1 - X2||^4`.
    pub m4: f64,
    /// Ordered pairs visited.
    pub pairs: usize,
    pub subsampled: bool,
}

pub fn pairwise_moment_estimates(sample: &DiscreteMeasure) -> Result<PairwiseMoments> {
    pairwise_moment_estimates_with(sample, DEFAULT_PAIR_BUDGET, SeedSpec::new(0x9A1E, 0))
}

/// Pairwise moment estimates.
///
/// For an empirical measure of `N` draws this is the U-statistic over the
/// `N(N-1)` ordered pairs of distinct draws (merged duplicates contribute
/// zero-distance pairs). For a measure without a sample size it is the exact
/// expectation under two independent draws. Beyond `budget` pairs, pairs are
/// subsampled uniformly.
pub fn pairwise_moment_estimates_with(
    sample: &DiscreteMeasure,
    budget: usize,
    seed: SeedSpec,
) -> Result<PairwiseMoments> {
    let k = sample.len();
    let f = |a: usize, b: usize| {
        let xa = sample.point(a);
        let d2 = sq_dist(xa, sample.point(b));
        (d2 * sq_norm(xa), d2 * d2)
    };
    match sample.sample_size() {
        Some(n) => {
            if n < 2 {
                return Err(Error::InvalidMeasure(format!(
                    "pairwise moments need at least 2 sample points, got {n}"
                )));
            }
            let counts: Vec<f64> = sample.weights().iter().map(|w| (w * n as f64).round()).collect();
            let total_pairs = n as f64 * (n as f64 - 1.0);
            // the exact sum runs over merged support points, k^2 terms
            if (k as f64) * (k as f64) <= budget as f64 {
                let (mut m22, mut m4) = (0.0, 0.0);
                for a in 0..k {
                    for b in 0..k {
                        if a != b {
                            let (u, v) = f(a, b);
                            let c = counts[a] * counts[b];
                            m22 += c * u;
                            m4 += c * v;
                        }
                    }
                }
                return Ok(PairwiseMoments {
                    m22: m22 / total_pairs,
                    m4: m4 / total_pairs,
                    pairs: total_pairs as usize,
                    subsampled: false,
                });
            }
            let mut cum = Vec::with_capacity(k);
            let mut acc = 0usize;
            for c in &counts {
                acc += *c as usize;
                cum.push(acc);
            }
            let owner = |draw: usize| cum.partition_point(|&c| c <= draw);
            let (m22, m4) = subsample_pairs(budget, seed, |rng| {
                let i = rng.random_range(0..n);
                let mut j = rng.random_range(0..n - 1);
                if j >= i {
                    j += 1;
                }
                (owner(i), owner(j))
            }, &f);
            Ok(PairwiseMoments {
                m22,
                m4,
                pairs: budget,
                subsampled: true,
            })
        }
        None => {
            let w = sample.weights();
            if k * k <= budget {
                let (mut m22, mut m4) = (0.0, 0.0);
                for a in 0..k {
                    for b in 0..k {
                        if a != b {
                            let (u, v) = f(a, b);
                            m22 += w[a] * w[b] * u;
                            m4 += w[a] * w[b] * v;
                        }
                    }
                }
                return Ok(PairwiseMoments {
                    m22,
                    m4,
                    pairs: k * k,
                    subsampled: false,
                });
            }
            let (m22, m4) = subsample_pairs(
                budget,
                seed,
                |rng| (sample.draw_index(rng), sample.draw_index(rng)),
                &f,
            );
            Ok(PairwiseMoments {
                m22,
                m4,
                pairs: budget,
                subsampled: true,
            })
        }
    }
}

fn subsample_pairs<P, F>(budget: usize, seed: SeedSpec, pick: P, f: &F) -> (f64, f64)
where
    P: Fn(&mut ChaCha8Rng) -> (usize, usize) + Sync,
    F: Fn(usize, usize) -> (f64, f64) + Sync,
{
    let parts: Vec<(f64, f64)> = chunk_spans(0, budget)
        .into_par_iter()
        .map(|(chunk, _, take)| {
            let mut rng = seed.chunk_rng(chunk);
            let (mut s22, mut s4) = (0.0, 0.0);
            for _ in 0..take {
                let (a, b) = pick(&mut rng);
                if a != b {
                    let (u, v) = f(a, b);
                    s22 += u;
                    s4 += v;
                }
            }
            (s22, s4)
        })
        .collect();
    let (s22, s4) = parts.iter().fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
    (s22 / budget as f64, s4 / budget as f64)
}
