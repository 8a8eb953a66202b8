//! Summary statistics and normality diagnostics for replication tables.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance; zero for fewer than two values.
pub fn variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    centered(xs).iter().map(|d| d * d).sum::<f64>() / (xs.len() - 1) as f64
}

/// Deviations from the mean, computed relative to the first value so that a
/// constant sample gives exact zeros.
fn centered(xs: &[f64]) -> Vec<f64> {
    let shift: Vec<f64> = xs.iter().map(|x| x - xs[0]).collect();
    let m = mean(&shift);
    shift.iter().map(|d| d - m).collect()
}

fn central_moment(xs: &[f64], order: i32) -> f64 {
    centered(xs).iter().map(|d| d.powi(order)).sum::<f64>() / xs.len() as f64
}

/// Moment skewness `m3 / m2^{3/2}`; `NaN` for constant data.
pub fn skewness(xs: &[f64]) -> f64 {
    let m2 = central_moment(xs, 2);
    if m2 <= 0.0 {
        return f64::NAN;
    }
    central_moment(xs, 3) / m2.powf(1.5)
}

/// Excess kurtosis `m4 / m2^2 - 3`; `NaN` for constant data.
pub fn excess_kurtosis(xs: &[f64]) -> f64 {
    let m2 = central_moment(xs, 2);
    if m2 <= 0.0 {
        return f64::NAN;
    }
    central_moment(xs, 4) / (m2 * m2) - 3.0
}

pub fn std_normal_cdf(x: f64) -> f64 {
    Normal::standard().cdf(x)
}

/// `z` with `Phi(z) = prob`.
pub fn std_normal_quantile(prob: f64) -> f64 {
    Normal::standard().inverse_cdf(prob)
}

/// Upper tail `P(K > x)` of the Kolmogorov distribution, where `K` is the
/// limit of `sqrt(n) D_n`.
pub fn kolmogorov_sf(x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    if x < 1.0 {
        // theta-function form converges fast for small x
        let c = std::f64::consts::PI.powi(2) / (8.0 * x * x);
        let s: f64 = (1..=20)
            .map(|k| {
                let j = (2 * k - 1) as f64;
                (-j * j * c).exp()
            })
            .sum();
        let cdf = (2.0 * std::f64::consts::PI).sqrt() / x * s;
        return (1.0 - cdf).clamp(0.0, 1.0);
    }
    let mut s = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * x * x).exp();
        s += if k % 2 == 1 { term } else { -term };
        if term < 1e-18 {
            break;
        }
    }
    (2.0 * s).clamp(0.0, 1.0)
}

/// Two-sided Kolmogorov-Smirnov statistic of `xs` against `cdf`.
pub fn ks_statistic(xs: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    v.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).max((i + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normality {
    pub skewness: f64,
    pub excess_kurtosis: f64,
    pub ks_statistic: f64,
    pub ks_pvalue: f64,
}

/// Studentizes by the sample mean and standard deviation, then tests against
/// `N(0, 1)` with the asymptotic Kolmogorov p-value. `None` when fewer than
/// three values or no spread.
pub fn normality(xs: &[f64]) -> Option<Normality> {
    if xs.len() < 3 {
        return None;
    }
    let m = mean(xs);
    let sd = variance(xs).sqrt();
    if !(sd > 0.0) {
        return None;
    }
    let z: Vec<f64> = xs.iter().map(|x| (x - m) / sd).collect();
    let d = ks_statistic(&z, std_normal_cdf);
    Some(Normality {
        skewness: skewness(xs),
        excess_kurtosis: excess_kurtosis(xs),
        ks_statistic: d,
        ks_pvalue: kolmogorov_sf((xs.len() as f64).sqrt() * d),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kolmogorov_reference_values() {
        // P(K > x) = 2 sum (-1)^{k-1} exp(-2 k^2 x^2), summed by hand to 4 terms
        assert!((kolmogorov_sf(1.36) - 0.0494).abs() < 2e-4);
        assert!((kolmogorov_sf(1.0) - 0.2700).abs() < 2e-4);
        assert!((kolmogorov_sf(1.63) - 0.0098).abs() < 2e-4);
        assert!((kolmogorov_sf(0.5) - 0.9639).abs() < 2e-4);
    }

    #[test]
    fn kolmogorov_branches_agree_at_switch() {
        let lo = kolmogorov_sf(1.0 - 1e-12);
        let hi = kolmogorov_sf(1.0);
        assert!((lo - hi).abs() < 1e-10);
        assert_eq!(kolmogorov_sf(0.0), 1.0);
        assert!(kolmogorov_sf(5.0) < 1e-20);
    }

    #[test]
    fn quantile_reference_values() {
        assert!((std_normal_quantile(0.975) - 1.959963984540054).abs() < 1e-8);
        assert!((std_normal_quantile(0.995) - 2.5758293035489).abs() < 1e-8);
        assert!(std_normal_quantile(0.5).abs() < 1e-12);
    }

    #[test]
    fn moments_of_small_sets() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(mean(&xs), 2.5);
        assert!((variance(&xs) - 5.0 / 3.0).abs() < 1e-15);
        assert!(skewness(&xs).abs() < 1e-15);
        // m4 / m2^2 = 2.5625 / 1.5625
        assert!((excess_kurtosis(&xs) - (2.5625 / 1.5625 - 3.0)).abs() < 1e-12);
        assert!(skewness(&[2.0, 2.0]).is_nan());
    }

    #[test]
    fn ks_statistic_of_midpoints() {
        // points at the uniform quantile midpoints: D = 1 / (2n)
        let xs: Vec<f64> = (0..10).map(|i| (i as f64 + 0.5) / 10.0).collect();
        let d = ks_statistic(&xs, |x| x.clamp(0.0, 1.0));
        assert!((d - 0.05).abs() < 1e-15);
    }

    #[test]
    fn normality_of_normal_quantiles() {
        let n = 400;
        let xs: Vec<f64> = (0..n)
            .map(|i| std_normal_quantile((i as f64 + 0.5) / n as f64))
            .collect();
        let r = normality(&xs).unwrap();
        assert!(r.ks_pvalue > 0.99);
        assert!(r.skewness.abs() < 1e-10);
        assert!(normality(&[1.0, 1.0, 1.0]).is_none());
    }
}
