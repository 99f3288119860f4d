use serde::Serialize;

use super::model::MonogamyModel;
use super::pde::{solve_limit_monogamy_observed, TwoSexDensity};
use super::population::MonogamyInitial;
use super::sim::{simulate_monogamy, MonogamyOptions};
use crate::error::{Error, Result};
use crate::fluctuation::{CheckResult, Verdict};
use crate::limit::LimitOptions;
use crate::model::PairTestFunction;
use crate::parallel::ordered_map;
use crate::rng::aux_stream;
use crate::stats::{anderson_darling_normal, bootstrap_ci, mean, variance};

/// Rate of the predictable quadratic variation of `(f, Z)` at the field:
/// deaths of singles, widowing, separation, births and marriage.
pub fn qv_rate(model: &MonogamyModel, field: &TwoSexDensity, f: &PairTestFunction) -> f64 {
    let phi = field.functionals(model);
    let n = field.cells();
    let da = field.da;
    let ages: Vec<f64> = (0..n).map(|j| field.midpoint(j)).collect();
    let ff: Vec<f64> = ages.iter().map(|&a| f.female_value(a)).collect();
    let fm: Vec<f64> = ages.iter().map(|&a| f.male_value(a)).collect();
    let newborn = [f.female_value(0.0), f.male_value(0.0)];
    let litter_form = |t: &crate::model::OutcomeTable| t.gamma_form(&newborn);
    let single_gamma = litter_form(model.single_litter());
    let couple_gamma = litter_form(model.couple_litter());

    let mut singles = 0.0;
    for j in 0..n {
        let d = field.female[j];
        if d != 0.0 {
            let v = ages[j];
            singles += d
                * (ff[j] * ff[j] * model.female_death(v, &phi) + single_gamma * model.single_birth(v, &phi));
        }
        let d = field.male[j];
        if d != 0.0 {
            singles += d * fm[j] * fm[j] * model.male_death(ages[j], &phi);
        }
    }
    let mut couples = 0.0;
    for j in 0..n {
        for l in 0..n {
            let c = field.couple[j * n + l];
            if c == 0.0 {
                continue;
            }
            let (v, w) = (ages[j], ages[l]);
            let fc = f.couple_value(v, w);
            let widow_m = fm[l] - fc;
            let widow_f = ff[j] - fc;
            let split = ff[j] + fm[l] - fc;
            couples += c
                * (widow_m * widow_m * model.female_death_married(v, w, &phi)
                    + widow_f * widow_f * model.male_death_married(v, w, &phi)
                    + split * split * model.separation(v, w, &phi)
                    + couple_gamma * model.couple_birth(v, w, &phi));
        }
    }
    let mut marriage = 0.0;
    for j in 0..n {
        let d = field.female[j];
        if d == 0.0 {
            continue;
        }
        for l in 0..n {
            let e = field.male[l];
            if e == 0.0 {
                continue;
            }
            let (v, w) = (ages[j], ages[l]);
            let jump = f.couple_value(v, w) - ff[j] - fm[l];
            marriage += d * e * jump * jump * model.marriage(v, w, &phi);
        }
    }
    (singles + couples * da + marriage * da) * da
}

#[derive(Clone, Debug, Serialize)]
pub struct MonogamyCheckOptions {
    pub t_end: f64,
    pub k_list: Vec<u64>,
    pub replicates: usize,
    /// Grid step of the coarse limit solve; a second solve at half the step
    /// supplies the extrapolated value and its error band.
    pub da: f64,
    pub master_seed: u64,
    pub workers: Option<usize>,
    pub flatness_max: f64,
    pub bootstrap_resamples: usize,
    pub degenerate_variance: f64,
}

impl MonogamyCheckOptions {
    pub fn new(t_end: f64, k_list: Vec<u64>, replicates: usize, da: f64, master_seed: u64) -> Self {
        MonogamyCheckOptions {
            t_end,
            k_list,
            replicates,
            da,
            master_seed,
            workers: None,
            flatness_max: 1.5,
            bootstrap_resamples: 2000,
            degenerate_variance: 1e-12,
        }
    }
}

/// Limit value and integrated QV rate of each function over `[0, T]`.
#[derive(Clone, Debug, Serialize)]
pub struct LimitQv {
    pub da: f64,
    pub value: Vec<f64>,
    pub qv: Vec<f64>,
}

/// Solves the limit on an aligned grid and integrates the QV rate by the
/// trapezoid rule over the solver steps.
pub fn limit_qv(
    model: &MonogamyModel,
    initial: &MonogamyInitial,
    fs: &[PairTestFunction],
    t_end: f64,
    da: f64,
) -> Result<LimitQv> {
    let cells = (initial.a_star() / da).ceil() as usize + 1;
    let s0 = TwoSexDensity::from_initial(initial, da, cells)?;
    let mut qv = vec![0.0; fs.len()];
    let mut prev: Option<Vec<f64>> = None;
    let opts = LimitOptions::new(t_end, da).with_stride(usize::MAX);
    let sol = solve_limit_monogamy_observed(model, &s0, &opts, |field| {
        let rates: Vec<f64> = fs.iter().map(|f| qv_rate(model, field, f)).collect();
        if let Some(p) = &prev {
            for ((q, a), b) in qv.iter_mut().zip(p).zip(&rates) {
                *q += 0.5 * da * (a + b);
            }
        }
        prev = Some(rates);
    })?;
    let last = sol.last();
    Ok(LimitQv {
        da,
        value: fs.iter().map(|f| last.pair(f)).collect(),
        qv,
    })
}

/// Replicate outcome at one K: `(f_j, S_T)/K` and `[M^{f_j}]_T / K`.
#[derive(Clone, Debug)]
struct Rep {
    k: u64,
    value: Vec<f64>,
    bracket: Vec<f64>,
}

/// Fluctuation checks for the monogamy model: sqrt(K)-scaling flatness of
/// `(f, Z^K_T)` across K, replicate quadratic variation of the martingale
/// part against the limit quadrature at the largest K, and Anderson-Darling
/// Gaussianity of `(f, Z^K_T)` at the largest K.
///
/// The quadrature is Richardson-extrapolated from solves at `da` and `da/2`;
/// its band is the difference of the two. The QV check passes when the
/// bootstrap 95% interval of the replicate mean overlaps that band.
pub fn monogamy_fluct_check(
    model: &MonogamyModel,
    initial: &MonogamyInitial,
    fs: &[PairTestFunction],
    opts: &MonogamyCheckOptions,
) -> Result<Verdict> {
    if opts.k_list.is_empty() || opts.k_list.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::contract("K list must be non-empty and strictly increasing"));
    }
    if opts.replicates < 8 {
        return Err(Error::contract("at least 8 replicates are needed"));
    }
    let coarse = limit_qv(model, initial, fs, opts.t_end, opts.da)?;
    let fine = limit_qv(model, initial, fs, opts.t_end, 0.5 * opts.da)?;
    let extrapolate = |c: f64, f: f64| 2.0 * f - c;

    let jobs: Vec<(u64, u64)> = opts
        .k_list
        .iter()
        .flat_map(|&k| (0..opts.replicates as u64).map(move |r| (k, r)))
        .collect();
    let sim_opts = |k: u64| {
        MonogamyOptions::new(opts.t_end, k)
            .with_grid(vec![opts.t_end])
            .with_observables(fs.to_vec())
            .without_events()
    };
    let reps = ordered_map(opts.workers, &jobs, |&(k, r)| {
        let s0 = initial.population(k)?;
        let t = simulate_monogamy(model, &s0, &sim_opts(k), opts.master_seed, r)?;
        let kf = k as f64;
        Ok(Rep {
            k,
            value: t.series.iter().map(|s| s[0] / kf).collect(),
            bracket: t.brackets.iter().map(|b| b / kf).collect(),
        })
    })?;

    let k_top = *opts.k_list.last().expect("non-empty");
    let mut rng = aux_stream(opts.master_seed, 0x3A11);
    let mut checks = Vec::new();
    for (j, f) in fs.iter().enumerate() {
        let limit = extrapolate(coarse.value[j], fine.value[j]);
        let z = |k: u64| -> Vec<f64> {
            reps.iter()
                .filter(|r| r.k == k)
                .map(|r| (k as f64).sqrt() * (r.value[j] - limit))
                .collect()
        };
        let top = z(k_top);
        let brackets: Vec<f64> = reps.iter().filter(|r| r.k == k_top).map(|r| r.bracket[j]).collect();
        let q = extrapolate(coarse.qv[j], fine.qv[j]);
        let band = (fine.qv[j] - coarse.qv[j]).abs();
        let var_top = variance(&top);
        if var_top < opts.degenerate_variance && q.abs() < opts.degenerate_variance {
            for c in ["scaling", "qv", "gaussianity"] {
                checks.push(CheckResult {
                    check: c.into(),
                    function: f.name.clone(),
                    time: opts.t_end,
                    passed: false,
                    skipped: true,
                    statistic: var_top,
                    threshold: opts.degenerate_variance,
                    detail: "degenerate variance; check skipped".into(),
                });
            }
            continue;
        }

        if opts.k_list.len() > 1 {
            let sds: Vec<f64> = opts.k_list.iter().map(|&k| variance(&z(k)).sqrt()).collect();
            let max = sds.iter().copied().fold(0.0, f64::max);
            let min = sds.iter().copied().fold(f64::INFINITY, f64::min);
            let ratio = if min > 0.0 { max / min } else { f64::INFINITY };
            checks.push(CheckResult {
                check: "scaling".into(),
                function: f.name.clone(),
                time: opts.t_end,
                passed: ratio <= opts.flatness_max,
                skipped: false,
                statistic: ratio,
                threshold: opts.flatness_max,
                detail: format!("sqrt(K)-scaled SD per K {:?}: {sds:?}", opts.k_list),
            });
        }

        let m = mean(&brackets);
        let (lo, hi) = bootstrap_ci(&brackets, mean, opts.bootstrap_resamples, 0.95, &mut rng);
        let overlap = lo <= q + band && q - band <= hi;
        checks.push(CheckResult {
            check: "qv".into(),
            function: f.name.clone(),
            time: opts.t_end,
            passed: overlap,
            skipped: false,
            statistic: m,
            threshold: q,
            detail: format!(
                "replicate [M]_T/K mean {m:.6} (95% CI [{lo:.6}, {hi:.6}]) vs quadrature {q:.6} \
                 +/- {band:.2e} (da {} -> {:.6}, da {} -> {:.6}) at K = {k_top}",
                coarse.da, coarse.qv[j], fine.da, fine.qv[j]
            ),
        });

        let ad = anderson_darling_normal(&top)?;
        checks.push(CheckResult {
            check: "gaussianity".into(),
            function: f.name.clone(),
            time: opts.t_end,
            passed: ad.passes(),
            skipped: false,
            statistic: ad.statistic,
            threshold: ad.critical_1pct,
            detail: format!("Anderson-Darling A^2 on {} standardized samples", ad.n),
        });
    }
    Ok(Verdict::new(opts.master_seed, checks))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::monogamy::model::MonogamySpec;
    use crate::monogamy::population::SingleBand;

    fn singles() -> MonogamyInitial {
        let band = SingleBand {
            age_lo: 0.0,
            age_hi: 1.0,
            mass: 1.0,
        };
        MonogamyInitial {
            females: vec![band.clone()],
            males: vec![band],
            couples: vec![],
        }
    }

    #[test]
    fn marriage_only_qv_is_the_pairing_integral() {
        // F = M = 1/(1 + rho t), so int_0^T rho F M dt = T / (1 + rho T).
        let rho = 1.0;
        let model = MonogamyModel::new(MonogamySpec::constant(0.0, 0.0, 0.0, 0.0, rho)).unwrap();
        let q = limit_qv(&model, &singles(), &[PairTestFunction::couple_count()], 1.0, 0.01).unwrap();
        let exact = 1.0 / (1.0 + rho);
        assert!((q.qv[0] - exact).abs() < 2e-3, "{} vs {exact}", q.qv[0]);
        assert!((q.value[0] - exact).abs() < 2e-3);
    }

    #[test]
    fn deterministic_model_has_no_fluctuations() {
        let model = MonogamyModel::new(MonogamySpec::constant(0.0, 0.0, 0.0, 0.0, 0.0)).unwrap();
        let opts = MonogamyCheckOptions::new(1.0, vec![10, 40], 10, 0.05, 1);
        let v = monogamy_fluct_check(&model, &singles(), &[PairTestFunction::head_count()], &opts).unwrap();
        assert!(v.passed);
        assert!(v.checks.iter().all(|c| c.skipped));
    }

    #[test]
    fn marriage_count_matches_pairing_quadrature() {
        let model = MonogamyModel::new(MonogamySpec::constant(0.0, 0.0, 0.0, 0.0, 1.0)).unwrap();
        let mut opts = MonogamyCheckOptions::new(1.0, vec![100, 400], 200, 0.02, 9);
        opts.bootstrap_resamples = 500;
        let v = monogamy_fluct_check(&model, &singles(), &[PairTestFunction::couple_count()], &opts).unwrap();
        let qv = v.checks.iter().find(|c| c.check == "qv").unwrap();
        assert!(qv.passed, "{}", qv.detail);
    }
}
