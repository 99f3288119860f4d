//! Small statistical toolkit used by the verification checks.

use rand::Rng;
use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::error::{Error, Result};

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Unbiased sample variance.
pub fn variance(x: &[f64]) -> f64 {
    let n = x.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(x);
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1) as f64
}

/// Standard error of the mean.
pub fn std_error(x: &[f64]) -> f64 {
    (variance(x) / x.len() as f64).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AndersonDarling {
    pub statistic: f64,
    /// Critical value at the 1% level for a normal law with estimated mean
    /// and variance.
    pub critical_1pct: f64,
    pub n: usize,
}

impl AndersonDarling {
    pub fn passes(&self) -> bool {
        self.statistic < self.critical_1pct
    }
}

/// Anderson-Darling normality test with mean and variance estimated from the
/// sample (small-sample corrected critical value).
pub fn anderson_darling_normal(x: &[f64]) -> Result<AndersonDarling> {
    let n = x.len();
    if n < 8 {
        return Err(Error::contract("Anderson-Darling needs at least 8 samples"));
    }
    let m = mean(x);
    let sd = variance(x).sqrt();
    if !(sd > 0.0) {
        return Err(Error::numerical("degenerate sample"));
    }
    let std = Normal::new(0.0, 1.0).expect("standard normal");
    let mut z: Vec<f64> = x.iter().map(|v| (v - m) / sd).collect();
    z.sort_by(f64::total_cmp);
    let nf = n as f64;
    let mut s = 0.0;
    for i in 0..n {
        let lo = std.cdf(z[i]).max(1e-300).ln();
        let hi = (1.0 - std.cdf(z[n - 1 - i])).max(1e-300).ln();
        s += (2 * i + 1) as f64 * (lo + hi);
    }
    let statistic = -nf - s / nf;
    let critical_1pct = 1.092 / (1.0 + 4.0 / nf - 25.0 / (nf * nf));
    Ok(AndersonDarling {
        statistic,
        critical_1pct,
        n,
    })
}

/// Complementary Kolmogorov distribution `P(K > lambda)`.
fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for j in 1..=200 {
        let term = (-2.0 * (j * j) as f64 * lambda * lambda).exp();
        sum += sign * term;
        if term < 1e-16 {
            break;
        }
        sign = -sign;
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Two-sample Kolmogorov-Smirnov statistic and asymptotic p-value.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::contract("KS test needs non-empty samples"));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    let en = (na * nb / (na + nb)).sqrt();
    let p = kolmogorov_q((en + 0.12 + 0.11 / en) * d);
    Ok((d, p))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ChiSquareTest {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
}

/// Pearson goodness of fit. Adjacent bins are pooled until each expected
/// count is at least `min_expected`; the final pool absorbs any remainder.
pub fn chi_square_gof(observed: &[u64], expected: &[f64], min_expected: f64) -> Result<ChiSquareTest> {
    if observed.len() != expected.len() || observed.is_empty() {
        return Err(Error::contract("observed and expected must have equal non-zero length"));
    }
    let mut pools: Vec<(f64, f64)> = Vec::new();
    let (mut o, mut e) = (0.0, 0.0);
    for (ob, ex) in observed.iter().zip(expected) {
        o += *ob as f64;
        e += ex;
        if e >= min_expected {
            pools.push((o, e));
            o = 0.0;
            e = 0.0;
        }
    }
    if e > 0.0 || o > 0.0 {
        match pools.last_mut() {
            Some(last) => {
                last.0 += o;
                last.1 += e;
            }
            None => pools.push((o, e)),
        }
    }
    if pools.len() < 2 {
        return Err(Error::numerical("too few bins after pooling"));
    }
    let statistic: f64 = pools.iter().map(|(o, e)| (o - e) * (o - e) / e).sum();
    let dof = pools.len() - 1;
    let dist = ChiSquared::new(dof as f64).map_err(|e| Error::numerical(e.to_string()))?;
    Ok(ChiSquareTest {
        statistic,
        dof,
        p_value: 1.0 - dist.cdf(statistic),
    })
}

/// Percentile bootstrap confidence interval for `stat`.
pub fn bootstrap_ci<R: Rng + ?Sized>(
    x: &[f64],
    stat: impl Fn(&[f64]) -> f64,
    resamples: usize,
    level: f64,
    rng: &mut R,
) -> (f64, f64) {
    let n = x.len();
    let mut buf = vec![0.0; n];
    let mut stats: Vec<f64> = (0..resamples)
        .map(|_| {
            for v in buf.iter_mut() {
                *v = x[rng.random_range(0..n)];
            }
            stat(&buf)
        })
        .collect();
    stats.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let idx = ((p * (resamples - 1) as f64).round() as usize).min(resamples - 1);
        stats[idx]
    };
    let alpha = 0.5 * (1.0 - level);
    (q(alpha), q(1.0 - alpha))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::aux_stream;
    use rand_distr::{Distribution, Exp, StandardNormal};

    #[test]
    fn moments() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(mean(&x), 2.5);
        assert!((variance(&x) - 5.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn ad_accepts_normal_rejects_exponential() {
        let mut rng = aux_stream(7, 1);
        let normal: Vec<f64> = (0..500).map(|_| StandardNormal.sample(&mut rng)).collect();
        assert!(anderson_darling_normal(&normal).unwrap().passes());
        let exp = Exp::new(1.0).unwrap();
        let skewed: Vec<f64> = (0..500).map(|_| exp.sample(&mut rng)).collect();
        assert!(!anderson_darling_normal(&skewed).unwrap().passes());
    }

    #[test]
    fn ad_critical_value_matches_reference_table() {
        // 1% critical value 1.092 / (1 + 4/n - 25/n^2) at n = 100.
        let x: Vec<f64> = (0..100).map(|i| (i as f64).sin()).collect();
        let ad = anderson_darling_normal(&x).unwrap();
        assert!((ad.critical_1pct - 1.092 / 1.0375).abs() < 1e-12);
    }

    #[test]
    fn ks_identical_and_shifted() {
        let a: Vec<f64> = (0..200).map(|i| i as f64).collect();
        let (d, p) = ks_two_sample(&a, &a).unwrap();
        assert_eq!(d, 0.0);
        assert!(p > 0.99);
        let b: Vec<f64> = a.iter().map(|v| v + 100.0).collect();
        let (d, p) = ks_two_sample(&a, &b).unwrap();
        assert!((d - 0.5).abs() < 1e-12);
        assert!(p < 1e-6);
    }

    #[test]
    fn kolmogorov_tail_reference_point() {
        // P(K > 1.36) is the classical 5% point.
        assert!((kolmogorov_q(1.358) - 0.05).abs() < 1e-3);
    }

    #[test]
    fn chi_square_exact_fit() {
        let t = chi_square_gof(&[10, 20, 30], &[10.0, 20.0, 30.0], 5.0).unwrap();
        assert_eq!(t.statistic, 0.0);
        assert_eq!(t.dof, 2);
        assert!((t.p_value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bootstrap_covers_mean() {
        let mut rng = aux_stream(3, 2);
        let x: Vec<f64> = (0..400).map(|_| StandardNormal.sample(&mut rng)).collect();
        let (lo, hi) = bootstrap_ci(&x, mean, 2000, 0.95, &mut rng);
        assert!(lo < mean(&x) && mean(&x) < hi);
        assert!(hi - lo < 0.4);
    }
}
