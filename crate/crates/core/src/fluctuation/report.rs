use serde::Serialize;

use super::sample::{z_values, FluctuationSample};
use crate::error::{Error, Result};
use crate::rng::aux_stream;
use crate::stats::{anderson_darling_normal, bootstrap_ci, variance};

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub check: String,
    pub function: String,
    pub time: f64,
    pub passed: bool,
    pub skipped: bool,
    pub statistic: f64,
    pub threshold: f64,
    pub detail: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct Verdict {
    pub passed: bool,
    pub master_seed: u64,
    pub checks: Vec<CheckResult>,
}

impl Verdict {
    pub fn new(master_seed: u64, checks: Vec<CheckResult>) -> Self {
        let passed = checks.iter().all(|c| c.passed || c.skipped);
        Verdict {
            passed,
            master_seed,
            checks,
        }
    }
}

/// Variance of `(f_j, Z_t)` predicted by the limit at grid index `g`.
#[derive(Clone, Debug, Serialize)]
pub struct VarianceTarget {
    pub function: usize,
    pub grid_index: usize,
    pub variance: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct CltSettings {
    pub variance_tolerance: f64,
    pub flatness_max: f64,
    pub min_replicates: usize,
    pub bootstrap_resamples: usize,
    pub degenerate_variance: f64,
    pub master_seed: u64,
}

impl Default for CltSettings {
    fn default() -> Self {
        CltSettings {
            variance_tolerance: 0.15,
            flatness_max: 1.5,
            min_replicates: 200,
            bootstrap_resamples: 2000,
            degenerate_variance: 1e-12,
            master_seed: 0,
        }
    }
}

/// Scaling flatness across K, variance match at the largest K, and
/// Anderson-Darling Gaussianity, for each target.
pub fn clt_report(
    samples: &[FluctuationSample],
    names: &[String],
    targets: &[VarianceTarget],
    settings: &CltSettings,
) -> Result<Verdict> {
    let mut ks: Vec<u64> = samples.iter().map(|s| s.k).collect();
    ks.sort_unstable();
    ks.dedup();
    let k_top = *ks.last().ok_or_else(|| Error::contract("no fluctuation samples"))?;
    let n_top = samples.iter().filter(|s| s.k == k_top).count();
    if n_top < settings.min_replicates {
        return Err(Error::contract(format!(
            "{n_top} replicates at K = {k_top}; at least {} required",
            settings.min_replicates
        )));
    }
    let mut rng = aux_stream(settings.master_seed, 0xB007);
    let mut checks = Vec::new();
    for tg in targets {
        let name = names
            .get(tg.function)
            .cloned()
            .ok_or_else(|| Error::contract("target refers to an unknown function"))?;
        let time = samples[0].times[tg.grid_index];
        let top = z_values(samples, k_top, tg.function, tg.grid_index);
        let var_top = variance(&top);
        let degenerate = var_top < settings.degenerate_variance && tg.variance < settings.degenerate_variance;
        let skip = |check: &str, detail: &str| CheckResult {
            check: check.into(),
            function: name.clone(),
            time,
            passed: false,
            skipped: true,
            statistic: var_top,
            threshold: settings.degenerate_variance,
            detail: detail.into(),
        };
        if degenerate {
            for c in ["scaling", "variance", "gaussianity"] {
                checks.push(skip(c, "degenerate variance; check skipped"));
            }
            continue;
        }

        if ks.len() > 1 {
            let sds: Vec<f64> = ks
                .iter()
                .map(|&k| variance(&z_values(samples, k, tg.function, tg.grid_index)).sqrt())
                .collect();
            let max = sds.iter().copied().fold(0.0, f64::max);
            let min = sds.iter().copied().fold(f64::INFINITY, f64::min);
            let ratio = if min > 0.0 { max / min } else { f64::INFINITY };
            checks.push(CheckResult {
                check: "scaling".into(),
                function: name.clone(),
                time,
                passed: ratio <= settings.flatness_max,
                skipped: false,
                statistic: ratio,
                threshold: settings.flatness_max,
                detail: format!("sqrt(K)-scaled SD per K {ks:?}: {sds:?}"),
            });
        }

        let rel = (var_top / tg.variance - 1.0).abs();
        let (lo, hi) = bootstrap_ci(&top, variance, settings.bootstrap_resamples, 0.95, &mut rng);
        checks.push(CheckResult {
            check: "variance".into(),
            function: name.clone(),
            time,
            passed: rel <= settings.variance_tolerance,
            skipped: false,
            statistic: rel,
            threshold: settings.variance_tolerance,
            detail: format!(
                "sample variance {var_top:.6} (95% CI [{lo:.6}, {hi:.6}]) vs predicted {:.6} at K = {k_top}",
                tg.variance
            ),
        });

        let ad = anderson_darling_normal(&top)?;
        checks.push(CheckResult {
            check: "gaussianity".into(),
            function: name.clone(),
            time,
            passed: ad.passes(),
            skipped: false,
            statistic: ad.statistic,
            threshold: ad.critical_1pct,
            detail: format!("Anderson-Darling A^2 on {} standardized samples", ad.n),
        });
    }
    Ok(Verdict::new(settings.master_seed, checks))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn samples(k: u64, values: &[f64]) -> Vec<FluctuationSample> {
        values
            .iter()
            .enumerate()
            .map(|(r, &v)| FluctuationSample {
                k,
                replicate: r as u64,
                times: vec![1.0],
                z: vec![vec![v]],
                scaled: vec![vec![0.0]],
            })
            .collect()
    }

    #[test]
    fn deterministic_samples_are_skipped() {
        let s = samples(100, &[0.0; 250]);
        let v = clt_report(
            &s,
            &["total".into()],
            &[VarianceTarget {
                function: 0,
                grid_index: 0,
                variance: 0.0,
            }],
            &CltSettings::default(),
        )
        .unwrap();
        assert!(v.passed);
        assert!(v.checks.iter().all(|c| c.skipped));
    }

    #[test]
    fn too_few_replicates_rejected() {
        let s = samples(100, &[1.0, 2.0]);
        assert!(clt_report(&s, &["total".into()], &[], &CltSettings::default()).is_err());
    }
}
