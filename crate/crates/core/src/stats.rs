//! Summary statistics, goodness-of-fit tests and distribution functions used by
//! the verification harness.

use statrs::distribution::{ChiSquared, ContinuousCDF};
use statrs::function::erf::erfc;
use statrs::function::gamma::{gamma_ur, ln_gamma};

/// Sum in a fixed pairwise-tree order so results do not depend on how the
/// terms were produced.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const LEAF: usize = 32;
    if values.len() <= LEAF {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    pairwise_sum(values) / values.len() as f64
}

/// Unbiased sample variance.
pub fn variance(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return f64::NAN;
    }
    let m = mean(values);
    let sq: Vec<f64> = values.iter().map(|v| (v - m) * (v - m)).collect();
    pairwise_sum(&sq) / (values.len() - 1) as f64
}

/// Standard error of the sample mean.
pub fn std_error(values: &[f64]) -> f64 {
    (variance(values) / values.len() as f64).sqrt()
}

/// Linear-interpolated empirical quantile, `q` in [0, 1].
pub fn quantile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let w = pos - lo as f64;
    sorted[lo] * (1.0 - w) + sorted[hi] * w
}

pub fn median(values: &[f64]) -> f64 {
    quantile(values, 0.5)
}

/// Least-squares slope of `y` against `x`.
pub fn ols_slope(x: &[f64], y: &[f64]) -> f64 {
    let mx = mean(x);
    let my = mean(y);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
    }
    sxy / sxx
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Log-density of Normal(mean, var) at `x`.
pub fn normal_log_pdf(x: f64, mean: f64, var: f64) -> f64 {
    let r = x - mean;
    -0.5 * (2.0 * std::f64::consts::PI * var).ln() - 0.5 * r * r / var
}

/// Upper quantile of the standard normal, e.g. 1.959964 for 0.975.
pub fn normal_quantile(p: f64) -> f64 {
    use statrs::distribution::Normal;
    Normal::new(0.0, 1.0).expect("standard normal").inverse_cdf(p)
}

/// One-sample Kolmogorov–Smirnov test result.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

impl KsResult {
    pub fn passes(&self, level: f64) -> bool {
        self.p_value >= level
    }
}

/// Kolmogorov–Smirnov test of `samples` against a continuous `cdf`.
pub fn ks_test<F: Fn(f64) -> f64>(samples: &[f64], cdf: F) -> KsResult {
    let n = samples.len();
    if n == 0 {
        return KsResult { statistic: 0.0, p_value: 1.0 };
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let nf = n as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in sorted.iter().enumerate() {
        let f = cdf(x);
        d = d.max(((i + 1) as f64 / nf - f).abs()).max((f - i as f64 / nf).abs());
    }
    KsResult { statistic: d, p_value: kolmogorov_sf(d, n) }
}

/// Survival function of the KS statistic using the asymptotic Kolmogorov
/// series with Stephens' finite-sample correction.
pub fn kolmogorov_sf(d: f64, n: usize) -> f64 {
    if d <= 0.0 {
        return 1.0;
    }
    let sn = (n as f64).sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=200 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

pub fn chi_square_sf(x: f64, df: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    gamma_ur(0.5 * df, 0.5 * x)
}

pub fn chi_square_quantile(p: f64, df: f64) -> f64 {
    ChiSquared::new(df).expect("positive df").inverse_cdf(p)
}

/// Upper tail of the noncentral chi-square law, evaluated as a Poisson mixture
/// of central chi-square tails.
pub fn noncentral_chi_square_sf(x: f64, df: f64, ncp: f64) -> f64 {
    if ncp <= 0.0 {
        return chi_square_sf(x, df);
    }
    if x <= 0.0 {
        return 1.0;
    }
    let half = 0.5 * ncp;
    // Sum outward from the Poisson mode so that large ncp stays accurate.
    let mode = half.floor() as i64;
    let log_weight = |j: i64| -half + j as f64 * half.ln() - ln_gamma(j as f64 + 1.0);
    let term = |j: i64| log_weight(j).exp() * chi_square_sf(x, df + 2.0 * j as f64);
    let mut total = term(mode);
    let mut j = mode + 1;
    loop {
        let t = term(j);
        total += t;
        if log_weight(j).exp() < 1e-17 {
            break;
        }
        j += 1;
    }
    let mut j = mode - 1;
    while j >= 0 {
        let t = term(j);
        total += t;
        if log_weight(j).exp() < 1e-17 {
            break;
        }
        j -= 1;
    }
    total.clamp(0.0, 1.0)
}

/// Chi-square goodness-of-fit of observed integer counts to a Poisson(mean)
/// law. Cells are merged from the tails until each expected count is at least
/// five.
pub fn poisson_gof(counts: &[u64], mean: f64) -> (f64, f64) {
    let r = counts.len() as f64;
    let max = counts.iter().copied().max().unwrap_or(0) as usize;
    let pmf = |k: usize| (-mean + k as f64 * mean.ln() - ln_gamma(k as f64 + 1.0)).exp();
    let hi = max.max((mean + 10.0 * mean.sqrt()) as usize) + 1;
    let mut observed = vec![0.0; hi + 1];
    for &c in counts {
        observed[c as usize] += 1.0;
    }
    let mut expected: Vec<f64> = (0..=hi).map(|k| r * pmf(k)).collect();
    // Fold the far upper tail into the last cell.
    let tail: f64 = r - expected.iter().sum::<f64>();
    expected[hi] += tail.max(0.0);

    let mut cells: Vec<(f64, f64)> = Vec::new();
    let mut acc = (0.0, 0.0);
    for k in 0..=hi {
        acc.0 += observed[k];
        acc.1 += expected[k];
        if acc.1 >= 5.0 {
            cells.push(acc);
            acc = (0.0, 0.0);
        }
    }
    if let Some(last) = cells.last_mut() {
        last.0 += acc.0;
        last.1 += acc.1;
    }
    let stat: f64 = cells.iter().map(|(o, e)| (o - e) * (o - e) / e).sum();
    let df = (cells.len() as f64 - 1.0).max(1.0);
    (stat, chi_square_sf(stat, df))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairwise_matches_naive_on_small_input() {
        let v: Vec<f64> = (1..=100).map(|k| k as f64).collect();
        assert_eq!(pairwise_sum(&v), 5050.0);
    }

    #[test]
    fn noncentral_one_df_matches_normal_route() {
        // P(chi2_1(ncp) > c) = P(|Z + sqrt(ncp)| > sqrt(c)).
        for &(c, ncp) in &[(3.841458820694124, 10.0), (2.0, 0.5), (6.63, 4.0), (1.0, 30.0)] {
            let s = (c as f64).sqrt();
            let r = (ncp as f64).sqrt();
            let oracle = normal_cdf(-s - r) + 1.0 - normal_cdf(s - r);
            let got = noncentral_chi_square_sf(c, 1.0, ncp);
            assert!((got - oracle).abs() < 1e-10, "{got} vs {oracle}");
        }
    }

    #[test]
    fn wald_power_at_ncp_ten() {
        let c = chi_square_quantile(0.95, 1.0);
        assert!((c - 3.841458820694124).abs() < 1e-8);
        let p = noncentral_chi_square_sf(c, 1.0, 10.0);
        assert!((p - 0.8853).abs() < 5e-4, "{p}");
    }

    #[test]
    fn ks_rejects_shifted_sample() {
        let xs: Vec<f64> = (0..500).map(|i| normal_quantile((i as f64 + 0.5) / 500.0) + 0.5).collect();
        assert!(ks_test(&xs, normal_cdf).p_value < 1e-6);
        let ys: Vec<f64> = (0..500).map(|i| normal_quantile((i as f64 + 0.5) / 500.0)).collect();
        assert!(ks_test(&ys, normal_cdf).p_value > 0.99);
    }

    #[test]
    fn quantile_interpolates() {
        let v = [4.0, 1.0, 3.0, 2.0];
        assert_eq!(median(&v), 2.5);
        assert_eq!(quantile(&v, 0.0), 1.0);
        assert_eq!(quantile(&v, 1.0), 4.0);
    }
}
