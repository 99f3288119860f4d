use serde::Serialize;

use super::config::{BuiltModel, CheckConfig, ExperimentConfig, ModelConfig, Stage, VarianceReference};
use super::output::Emitter;
use crate::error::{Error, Result};
use crate::fluctuation::{
    clt_report, estimate_z, lyapunov_moments, z_values, CheckResult, CltSettings, FluctuationSample, LyapunovOptions,
    MomentField, VarianceTarget, Verdict, ZOptions,
};
use crate::limit::{frozen_environment_error, solve_density, solve_limit, CohortTrajectory, LimitOptions};
use crate::model::{CoupleState, InitialCondition, PairTestFunction, RateModel, TestFunction, TypeSel};
use crate::monogamy::{
    accounting_series, monogamy_fluct_check, simulate_monogamy, solve_limit_monogamy_observed, MonogamyCheckOptions,
    MonogamyInitial, MonogamyLimit, MonogamyModel, MonogamyOptions, TwoSexDensity,
};
use crate::parallel::ordered_map;
use crate::simulator::{simulate, EventRecord, MartingaleAnalyzer, SimOptions};
use crate::stats::{mean, std_error, variance};

pub(crate) fn check(
    name: &str,
    function: &str,
    time: f64,
    passed: bool,
    statistic: f64,
    threshold: f64,
    detail: String,
) -> CheckResult {
    CheckResult {
        check: name.to_string(),
        function: function.to_string(),
        time,
        passed,
        skipped: false,
        statistic,
        threshold,
        detail,
    }
}

/// Verdict file body: the stage's checks plus the tolerances in force.
#[derive(Serialize)]
struct StageVerdict<'a> {
    stage: &'a str,
    passed: bool,
    master_seed: u64,
    tolerances: &'a CheckConfig,
    checks: &'a [CheckResult],
}

pub(crate) struct Context<'a> {
    pub cfg: &'a ExperimentConfig,
    pub workers: Option<usize>,
    pub em: &'a mut Emitter,
    pub verdicts: Vec<(Stage, String, bool)>,
    single: Option<Single>,
    mono: Option<Mono>,
}

struct Single {
    model: RateModel,
    initial: InitialCondition,
    fs: Vec<TestFunction>,
    limit: Option<CohortTrajectory>,
    samples: Option<Vec<FluctuationSample>>,
    moments: Option<Vec<MomentField>>,
}

struct Mono {
    model: MonogamyModel,
    initial: MonogamyInitial,
    fs: Vec<PairTestFunction>,
    limit: Option<MonogamyLimit>,
    asymmetry: f64,
}

fn header(fs: &[String], stats: &[&str]) -> Vec<String> {
    let mut h = vec!["time".to_string()];
    for f in fs {
        for s in stats {
            h.push(format!("{f}:{s}"));
        }
    }
    h
}

fn grid_step(cfg: &ExperimentConfig) -> f64 {
    cfg.run.t_end / cfg.run.grid_intervals as f64
}

fn multiple_of(x: f64, step: f64) -> Option<usize> {
    let n = (x / step).round();
    (n >= 1.0 && (n * step - x).abs() <= 1e-9 * x.abs().max(1.0)).then_some(n as usize)
}

/// Mean and standard deviation at each grid time of `series[r][j][g] / K`.
fn summary_rows(grid: &[f64], n_fs: usize, series: &[Vec<Vec<f64>>], k: u64) -> Vec<Vec<f64>> {
    let kf = k as f64;
    grid.iter()
        .enumerate()
        .map(|(g, &t)| {
            let mut row = vec![t];
            for j in 0..n_fs {
                let x: Vec<f64> = series.iter().map(|s| s[j][g] / kf).collect();
                row.push(mean(&x));
                row.push(if x.len() > 1 { variance(&x).sqrt() } else { 0.0 });
            }
            row
        })
        .collect()
}

/// Mean over replicates of the sup-norm distance between `series / K` and
/// the reference, per function, and its standard error.
fn sup_errors(series: &[Vec<Vec<f64>>], reference: &[Vec<f64>], k: u64) -> Vec<(f64, f64)> {
    let kf = k as f64;
    reference
        .iter()
        .enumerate()
        .map(|(j, lim)| {
            let e: Vec<f64> = series
                .iter()
                .map(|s| s[j].iter().zip(lim).map(|(x, l)| (x / kf - l).abs()).fold(0.0, f64::max))
                .collect();
            (mean(&e), if e.len() > 1 { std_error(&e) } else { 0.0 })
        })
        .collect()
}

/// Decrease across K and first-to-last ratio of the sup errors.
fn lln_checks(names: &[String], ks: &[u64], errors: &[Vec<(f64, f64)>], ratio_min: f64, t_end: f64) -> Vec<CheckResult> {
    let mut out = Vec::new();
    for (j, name) in names.iter().enumerate() {
        let e: Vec<f64> = errors.iter().map(|row| row[j].0).collect();
        let worst = e.windows(2).map(|w| w[1] / w[0]).fold(0.0, f64::max);
        out.push(check(
            "lln_decreasing",
            name,
            t_end,
            e.windows(2).all(|w| w[1] < w[0]),
            worst,
            1.0,
            format!("mean sup errors {e:?} at K = {ks:?}"),
        ));
        let ratio = e[0] / e[e.len() - 1];
        out.push(check(
            "lln_ratio",
            name,
            t_end,
            ks.len() >= 2 && ratio >= ratio_min,
            ratio,
            ratio_min,
            format!("error at K = {} over error at K = {}", ks[0], ks[ks.len() - 1]),
        ));
    }
    out
}

impl<'a> Context<'a> {
    pub fn new(cfg: &'a ExperimentConfig, em: &'a mut Emitter, workers: Option<usize>) -> Result<Self> {
        let (single, mono) = match cfg.model.build()? {
            BuiltModel::Single(model) => {
                let initial = cfg.initial.single();
                initial.validate(model.n_types())?;
                let fs = cfg.single_functions()?;
                for f in &fs {
                    for t in &f.terms {
                        if let TypeSel::Only(k) = t.types {
                            if k >= model.n_types() {
                                return Err(Error::contract(format!(
                                    "test function {} selects type {k} of a {}-type model",
                                    f.name,
                                    model.n_types()
                                )));
                            }
                        }
                    }
                }
                (
                    Some(Single {
                        model,
                        initial,
                        fs,
                        limit: None,
                        samples: None,
                        moments: None,
                    }),
                    None,
                )
            }
            BuiltModel::Monogamy(model) => {
                let initial = cfg.initial.monogamy();
                initial.validate()?;
                (
                    None,
                    Some(Mono {
                        model,
                        initial,
                        fs: cfg.couple_functions()?,
                        limit: None,
                        asymmetry: 0.0,
                    }),
                )
            }
        };
        Ok(Context {
            cfg,
            workers,
            em,
            verdicts: Vec::new(),
            single,
            mono,
        })
    }

    pub fn run(&mut self, stage: Stage) -> Result<()> {
        match stage {
            Stage::Simulate => self.simulate(),
            Stage::Martingale => self.martingale(),
            Stage::SolveLimit => self.solve_limit(),
            Stage::SolverCheck => self.solver_check(),
            Stage::Lln => self.lln(),
            Stage::EstimateZ => self.estimate_z(),
            Stage::LyapunovMoments => self.lyapunov(),
            Stage::CltReport => self.clt_report(),
            Stage::Immigration => self.immigration(),
            Stage::MonogamySimulate => self.monogamy_simulate(),
            Stage::MonogamyLimit => self.monogamy_limit(),
            Stage::MonogamyLln => self.monogamy_lln(),
            Stage::Accounting => self.accounting(),
            Stage::MonogamyFluct => self.monogamy_fluct(),
        }
    }

    fn emit_verdict(&mut self, stage: Stage, verdict: Verdict) -> Result<()> {
        let file = format!("verdict_{}.json", stage.name());
        self.em.write_json(
            &file,
            &StageVerdict {
                stage: stage.name(),
                passed: verdict.passed,
                master_seed: verdict.master_seed,
                tolerances: &self.cfg.checks,
                checks: &verdict.checks,
            },
        )?;
        self.verdicts.push((stage, file, verdict.passed));
        Ok(())
    }

    fn single(&self) -> &Single {
        self.single.as_ref().expect("single-age stage on a single-age model")
    }

    fn mono(&self) -> &Mono {
        self.mono.as_ref().expect("monogamy stage on the monogamy model")
    }

    fn seed(&self) -> u64 {
        self.cfg.run.master_seed
    }

    fn dt(&self) -> Result<f64> {
        self.cfg
            .run
            .dt
            .ok_or_else(|| Error::contract("this stage needs run.dt"))
    }

    fn da(&self) -> Result<f64> {
        self.cfg
            .run
            .da
            .ok_or_else(|| Error::contract("this stage needs run.da"))
    }

    fn names(&self) -> Vec<String> {
        match (&self.single, &self.mono) {
            (Some(s), _) => s.fs.iter().map(|f| f.name.clone()).collect(),
            (_, Some(m)) => m.fs.iter().map(|f| f.name.clone()).collect(),
            _ => unreachable!(),
        }
    }

    /// Observable series of every replicate at `k`.
    fn single_series(&self, model: &RateModel, k: u64, reps: usize) -> Result<Vec<Vec<Vec<f64>>>> {
        let s = self.single();
        let opts = SimOptions::new(self.cfg.run.t_end, k)
            .with_grid(self.cfg.grid())
            .with_observables(s.fs.clone())
            .without_events();
        let s0 = s.initial.population(model.n_types(), k)?;
        let reps: Vec<u64> = (0..reps as u64).collect();
        ordered_map(self.workers, &reps, |&r| Ok(simulate(model, &s0, &opts, self.seed(), r)?.series))
    }

    fn mono_series(&self, k: u64) -> Result<Vec<Vec<Vec<f64>>>> {
        let m = self.mono();
        let opts = MonogamyOptions::new(self.cfg.run.t_end, k)
            .with_grid(self.cfg.grid())
            .with_observables(m.fs.clone())
            .without_events();
        let s0 = m.initial.population(k)?;
        let reps: Vec<u64> = (0..self.cfg.run.replicates as u64).collect();
        ordered_map(self.workers, &reps, |&r| {
            Ok(simulate_monogamy(&m.model, &s0, &opts, self.seed(), r)?.series)
        })
    }

    fn simulate(&mut self) -> Result<()> {
        let grid = self.cfg.grid();
        let names = self.names();
        let model = self.single().model.clone();
        for &k in &self.cfg.run.k_list {
            let series = self.single_series(&model, k, self.cfg.run.replicates)?;
            let rows = summary_rows(&grid, names.len(), &series, k);
            self.em.write_csv(&format!("simulate_K{k}.csv"), &header(&names, &["mean", "sd"]), &rows)?;
        }
        if self.cfg.outputs.event_log {
            let s = self.single();
            let k = self.cfg.run.k_list[0];
            let s0 = s.initial.population(model.n_types(), k)?;
            let opts = SimOptions::new(self.cfg.run.t_end, k).with_grid(grid.clone());
            let traj = simulate(&model, &s0, &opts, self.seed(), 0)?;
            let log = EventLog {
                k,
                replicate: 0,
                master_seed: self.seed(),
                t_end: self.cfg.run.t_end,
                initial: traj.initial.members().iter().map(|x| (x.kind, -x.birth_time)).collect(),
                events: &traj.events,
            };
            self.em.write_json(&format!("events_K{k}.json"), &log)?;
        }
        Ok(())
    }

    fn martingale(&mut self) -> Result<()> {
        let s = self.single();
        let t_end = self.cfg.run.t_end;
        let immigrant_age = s.model.immigration().map_or(0.0, |im| im.max_age());
        let omega = s.initial.a_star().max(immigrant_age) + t_end;
        let analyzer = MartingaleAnalyzer::new(&s.model, &s.fs, omega)?;
        let names = self.names();
        let closed_form = match &self.cfg.model {
            ModelConfig::BirthDeath(bd) if bd.immigration.is_none() => Some((bd.birth, bd.death)),
            _ => None,
        };
        let sigma = self.cfg.checks.standard_errors;
        let mut checks = Vec::new();
        let mut files = Vec::new();
        for &k in &self.cfg.run.k_list {
            let s0 = s.initial.population(s.model.n_types(), k)?;
            let opts = SimOptions::new(t_end, k).with_grid(vec![t_end]);
            let reps: Vec<u64> = (0..self.cfg.run.replicates as u64).collect();
            let finals = ordered_map(self.workers, &reps, |&r| {
                let traj = simulate(&s.model, &s0, &opts, self.seed(), r)?;
                Ok(analyzer
                    .analyze(&traj)?
                    .iter()
                    .map(|m| [m.final_residual(), m.final_bracket(), m.final_predictable()])
                    .collect::<Vec<_>>())
            })?;
            let mut head = vec!["replicate".to_string()];
            for n in &names {
                for c in ["residual", "bracket", "predictable"] {
                    head.push(format!("{n}:{c}"));
                }
            }
            let rows: Vec<Vec<f64>> = finals
                .iter()
                .enumerate()
                .map(|(r, fs)| std::iter::once(r as f64).chain(fs.iter().flatten().copied()).collect())
                .collect();
            files.push((format!("martingale_K{k}.csv"), head, rows));
            for (j, name) in names.iter().enumerate() {
                let col = |c: usize| finals.iter().map(|f| f[j][c]).collect::<Vec<f64>>();
                let (res, br, pr) = (col(0), col(1), col(2));
                let z = mean(&res).abs() / std_error(&res);
                checks.push(check(
                    "martingale_mean",
                    name,
                    t_end,
                    z <= sigma,
                    z,
                    sigma,
                    format!("K = {k}: mean {} with standard error {}", mean(&res), std_error(&res)),
                ));
                let d: Vec<f64> = br.iter().zip(&pr).map(|(a, b)| a - b).collect();
                let zd = mean(&d).abs() / std_error(&d);
                checks.push(check(
                    "qv_match",
                    name,
                    t_end,
                    zd <= sigma,
                    zd,
                    sigma,
                    format!(
                        "K = {k}: mean bracket {} vs mean predictable {}; paired standard error {}",
                        mean(&br),
                        mean(&pr),
                        std_error(&d)
                    ),
                ));
                if let (Some((b, h)), true) = (closed_form, s.fs[j] == TestFunction::total()) {
                    let r = b - h;
                    let n0 = s0.len() as f64;
                    let want = if r == 0.0 {
                        (b + h) * n0 * t_end
                    } else {
                        (b + h) * n0 * ((r * t_end).exp() - 1.0) / r
                    };
                    let tol = self.cfg.checks.qv_closed_form;
                    for (label, x) in [("qv_closed_form_bracket", &br), ("qv_closed_form_predictable", &pr)] {
                        let rel = (mean(x) / want - 1.0).abs();
                        checks.push(check(
                            label,
                            name,
                            t_end,
                            rel <= tol,
                            rel,
                            tol,
                            format!("K = {k}: mean {} vs closed form {want}", mean(x)),
                        ));
                    }
                }
            }
        }
        for (f, h, rows) in files {
            self.em.write_csv(&f, &h, &rows)?;
        }
        self.emit_verdict(Stage::Martingale, Verdict::new(self.seed(), checks))
    }

    fn solve_limit(&mut self) -> Result<()> {
        let dt = self.dt()?;
        let step = grid_step(self.cfg);
        let lyap = self.cfg.stages().contains(&Stage::LyapunovMoments);
        let record = if lyap {
            let da = self.da()?;
            multiple_of(step, da)
                .ok_or_else(|| Error::contract("the checkpoint spacing must be a multiple of run.da"))?;
            multiple_of(da, dt).ok_or_else(|| Error::contract("run.da must be a multiple of run.dt"))?;
            da
        } else {
            multiple_of(step, dt).ok_or_else(|| Error::contract("the checkpoint spacing must be a multiple of run.dt"))?;
            step
        };
        let s = self.single();
        let s0 = s.initial.cohorts(s.model.n_types(), self.cfg.run.atoms_per_band)?;
        let limit = solve_limit(&s.model, &s0, &LimitOptions::new(self.cfg.run.t_end, dt).recording_every(record))?;
        let grid = self.cfg.grid();
        let reference = limit_reference(&limit, &s.fs, &grid)?;
        let rows: Vec<Vec<f64>> = grid
            .iter()
            .enumerate()
            .map(|(g, &t)| std::iter::once(t).chain(reference.iter().map(|r| r[g])).collect())
            .collect();
        let names = self.names();
        self.em.write_csv("limit.csv", &header(&names, &["limit"]), &rows)?;
        self.single.as_mut().unwrap().limit = Some(limit);
        Ok(())
    }

    fn solver_check(&mut self) -> Result<()> {
        if self.single().limit.is_none() {
            self.solve_limit()?;
        }
        let s = self.single();
        let (dt, da) = (self.dt()?, self.da()?);
        let t_end = self.cfg.run.t_end;
        let grid = self.cfg.grid();
        let stride = multiple_of(grid_step(self.cfg), da)
            .ok_or_else(|| Error::contract("the checkpoint spacing must be a multiple of run.da"))?;
        let cells = (s.initial.a_star() / da).ceil() as usize + 1;
        let d0 = s.initial.density(s.model.n_types(), da, cells)?;
        let density = solve_density(&s.model, &d0, &LimitOptions::new(t_end, da).with_stride(stride))?;
        let limit = s.limit.as_ref().unwrap();
        let cohort = limit_reference(limit, &s.fs, &grid)?;
        let names = self.names();
        let mut checks = Vec::new();
        let mut rows: Vec<Vec<f64>> = grid.iter().map(|&t| vec![t]).collect();
        let tol = self.cfg.checks.solver_relative;
        for (j, f) in s.fs.iter().enumerate() {
            let dens = density.series(f);
            if dens.len() != grid.len() {
                return Err(Error::contract("density snapshots do not match the checkpoint grid"));
            }
            let mut worst: f64 = 0.0;
            for (g, row) in rows.iter_mut().enumerate() {
                let (c, d) = (cohort[j][g], dens[g]);
                row.push(c);
                row.push(d);
                worst = worst.max((c - d).abs() / c.abs().max(1e-12));
            }
            checks.push(check(
                "solver_agreement",
                &names[j],
                t_end,
                worst <= tol,
                worst,
                tol,
                format!("cohort solver at dt = {dt} vs density solver at da = {da}, worst relative gap over the grid"),
            ));
        }
        let c0 = s.initial.cohorts(s.model.n_types(), self.cfg.run.atoms_per_band)?;
        let phi = c0.functionals(&s.model);
        let frozen = frozen_environment_error(&s.model, &c0, &phi, t_end, dt)?;
        let ftol = self.cfg.checks.frozen_relative;
        checks.push(check(
            "frozen_environment",
            "all",
            t_end,
            frozen <= ftol,
            frozen,
            ftol,
            format!("environment frozen at phi = {phi:?}"),
        ));
        self.em
            .write_csv("solver_check.csv", &header(&names, &["cohort", "density"]), &rows)?;
        self.emit_verdict(Stage::SolverCheck, Verdict::new(self.seed(), checks))
    }

    fn lln(&mut self) -> Result<()> {
        if self.single().limit.is_none() {
            self.solve_limit()?;
        }
        let s = self.single();
        let reference = limit_reference(s.limit.as_ref().unwrap(), &s.fs, &self.cfg.grid())?;
        let model = s.model.clone();
        let ks = self.cfg.run.k_list.clone();
        let mut errors = Vec::new();
        for &k in &ks {
            let series = self.single_series(&model, k, self.cfg.run.replicates)?;
            errors.push(sup_errors(&series, &reference, k));
        }
        self.emit_lln(Stage::Lln, "lln.csv", &ks, &errors, Vec::new())
    }

    fn emit_lln(
        &mut self,
        stage: Stage,
        file: &str,
        ks: &[u64],
        errors: &[Vec<(f64, f64)>],
        mut extra: Vec<CheckResult>,
    ) -> Result<()> {
        let names = self.names();
        let mut head = vec!["K".to_string()];
        for n in &names {
            head.push(format!("{n}:sup_error"));
            head.push(format!("{n}:se"));
        }
        let rows: Vec<Vec<f64>> = ks
            .iter()
            .zip(errors)
            .map(|(&k, e)| std::iter::once(k as f64).chain(e.iter().flat_map(|&(m, s)| [m, s])).collect())
            .collect();
        self.em.write_csv(file, &head, &rows)?;
        let mut checks = lln_checks(&names, ks, errors, self.cfg.checks.lln_ratio_min, self.cfg.run.t_end);
        checks.append(&mut extra);
        self.emit_verdict(stage, Verdict::new(self.seed(), checks))
    }

    fn estimate_z(&mut self) -> Result<()> {
        let s = self.single();
        let grid = self.cfg.grid();
        let opts = ZOptions {
            t_end: self.cfg.run.t_end,
            k_list: self.cfg.run.k_list.clone(),
            replicates: self.cfg.run.replicates,
            grid: grid.clone(),
            master_seed: self.seed(),
            workers: self.workers,
        };
        let samples = estimate_z(&s.model, &s.initial, s.limit.as_ref().unwrap(), &s.fs, &opts)?;
        let names = self.names();
        for &k in &self.cfg.run.k_list {
            let rows: Vec<Vec<f64>> = grid
                .iter()
                .enumerate()
                .map(|(g, &t)| {
                    let mut row = vec![t];
                    for j in 0..names.len() {
                        let z = z_values(&samples, k, j, g);
                        row.push(mean(&z));
                        row.push(if z.len() > 1 { variance(&z) } else { 0.0 });
                    }
                    row
                })
                .collect();
            self.em.write_csv(&format!("z_K{k}.csv"), &header(&names, &["mean", "variance"]), &rows)?;
        }
        self.single.as_mut().unwrap().samples = Some(samples);
        Ok(())
    }

    fn lyapunov(&mut self) -> Result<()> {
        let s = self.single();
        let opts = LyapunovOptions {
            record_every: grid_step(self.cfg),
            ..LyapunovOptions::new(self.cfg.run.t_end, self.da()?)
        };
        let moments = lyapunov_moments(&s.model, s.limit.as_ref().unwrap(), &opts)?;
        let rows: Vec<Vec<f64>> = moments
            .iter()
            .map(|m| std::iter::once(m.time).chain(s.fs.iter().flat_map(|f| [m.mean_of(f), m.variance(f)])).collect())
            .collect();
        let names = self.names();
        self.em.write_csv("lyapunov.csv", &header(&names, &["mean", "variance"]), &rows)?;
        self.single.as_mut().unwrap().moments = Some(moments);
        Ok(())
    }

    fn clt_report(&mut self) -> Result<()> {
        let s = self.single();
        let t_end = self.cfg.run.t_end;
        let last = self.cfg.run.grid_intervals;
        let targets = match self.cfg.checks.variance_reference {
            VarianceReference::Lyapunov => {
                let m = s.moments.as_ref().and_then(|m| m.last()).unwrap();
                if (m.time - t_end).abs() > 1e-9 * t_end.max(1.0) {
                    return Err(Error::contract("Lyapunov moments do not reach T"));
                }
                s.fs.iter()
                    .enumerate()
                    .map(|(j, f)| VarianceTarget {
                        function: j,
                        grid_index: last,
                        variance: m.variance(f),
                    })
                    .collect::<Vec<_>>()
            }
            VarianceReference::ClosedForm => {
                let (b, h) = match &self.cfg.model {
                    ModelConfig::BirthDeath(bd) if bd.immigration.is_none() => (bd.birth, bd.death),
                    _ => {
                        return Err(Error::contract(
                            "the closed-form variance needs the birth_death family without immigration",
                        ))
                    }
                };
                let x0 = s.initial.total_mass();
                let r = b - h;
                let v = if r == 0.0 {
                    (b + h) * x0 * t_end
                } else {
                    let e = (r * t_end).exp();
                    (b + h) * x0 * e * (e - 1.0) / r
                };
                s.fs.iter()
                    .enumerate()
                    .map(|(j, f)| {
                        if *f == TestFunction::total() {
                            Ok(VarianceTarget {
                                function: j,
                                grid_index: last,
                                variance: v,
                            })
                        } else {
                            Err(Error::contract(format!("no closed-form variance for {}", f.name)))
                        }
                    })
                    .collect::<Result<Vec<_>>>()?
            }
        };
        let c = &self.cfg.checks;
        let settings = CltSettings {
            variance_tolerance: c.variance_tolerance,
            flatness_max: c.flatness_max,
            min_replicates: c.min_replicates,
            bootstrap_resamples: c.bootstrap_resamples,
            degenerate_variance: 1e-12,
            master_seed: self.seed(),
        };
        let verdict = clt_report(s.samples.as_ref().unwrap(), &self.names(), &targets, &settings)?;
        self.emit_verdict(Stage::CltReport, verdict)
    }

    fn immigration(&mut self) -> Result<()> {
        let s = self.single();
        if s.model.immigration().is_none() {
            return Err(Error::contract("the immigration stage needs a model with immigration"));
        }
        let mut base = s.model.spec.clone();
        base.immigration = None;
        base.bounds.g_max = None;
        let base = RateModel::new(base)?;
        let dt = self.dt()?;
        let t_end = self.cfg.run.t_end;
        let c0 = s.initial.cohorts(base.n_types(), self.cfg.run.atoms_per_band)?;
        let limit = solve_limit(&base, &c0, &LimitOptions::new(t_end, dt).with_stride(usize::MAX))?;
        let target: Vec<f64> = s.fs.iter().map(|f| limit.last().pair(f)).collect();
        let model = s.model.clone();
        let names = self.names();
        let ks = self.cfg.run.k_list.clone();
        let last = self.cfg.run.grid_intervals;
        let mut gaps = Vec::new();
        let mut rows = Vec::new();
        for &k in &ks {
            let series = self.single_series(&model, k, self.cfg.run.replicates)?;
            let mut row = vec![k as f64];
            let mut gap = Vec::new();
            for (j, lim) in target.iter().enumerate() {
                let x: Vec<f64> = series.iter().map(|s| s[j][last] / k as f64).collect();
                let d = mean(&x) - lim;
                row.extend([mean(&x), std_error(&x), d]);
                gap.push((d, std_error(&x)));
            }
            rows.push(row);
            gaps.push(gap);
        }
        let mut head = vec!["K".to_string()];
        for n in &names {
            head.extend([format!("{n}:mean"), format!("{n}:se"), format!("{n}:gap")]);
        }
        self.em.write_csv("immigration.csv", &head, &rows)?;
        let [lo, hi] = self.cfg.checks.immigration_ratio;
        let mut checks = Vec::new();
        for (j, name) in names.iter().enumerate() {
            for w in 0..ks.len().saturating_sub(1) {
                let (a, b) = (gaps[w][j], gaps[w + 1][j]);
                let factor = a.0.abs() / b.0.abs();
                checks.push(check(
                    "immigration_shrink",
                    name,
                    t_end,
                    factor >= lo && factor <= hi,
                    factor,
                    hi,
                    format!(
                        "gap {} (se {}) at K = {} over gap {} (se {}) at K = {}; band [{lo}, {hi}], no-immigration limit {}",
                        a.0, a.1, ks[w], b.0, b.1, ks[w + 1], target[j]
                    ),
                ));
            }
        }
        self.emit_verdict(Stage::Immigration, Verdict::new(self.seed(), checks))
    }

    fn monogamy_simulate(&mut self) -> Result<()> {
        let grid = self.cfg.grid();
        let names = self.names();
        for &k in &self.cfg.run.k_list {
            let series = self.mono_series(k)?;
            let rows = summary_rows(&grid, names.len(), &series, k);
            self.em
                .write_csv(&format!("monogamy_simulate_K{k}.csv"), &header(&names, &["mean", "sd"]), &rows)?;
        }
        if self.cfg.outputs.event_log {
            let m = self.mono();
            let k = self.cfg.run.k_list[0];
            let s0 = m.initial.population(k)?;
            let opts = MonogamyOptions::new(self.cfg.run.t_end, k).with_grid(grid);
            let traj = simulate_monogamy(&m.model, &s0, &opts, self.seed(), 0)?;
            let log = MonogamyEventLog {
                k,
                replicate: 0,
                master_seed: self.seed(),
                t_end: self.cfg.run.t_end,
                initial: traj.initial.states().collect(),
                events: &traj.events,
            };
            self.em.write_json(&format!("monogamy_events_K{k}.json"), &log)?;
        }
        Ok(())
    }

    fn monogamy_limit(&mut self) -> Result<()> {
        let da = self.da()?;
        let stride = multiple_of(grid_step(self.cfg), da)
            .ok_or_else(|| Error::contract("the checkpoint spacing must be a multiple of run.da"))?;
        let m = self.mono();
        let cells = (m.initial.a_star() / da).ceil() as usize + 1;
        let s0 = TwoSexDensity::from_initial(&m.initial, da, cells)?;
        let mut asymmetry: f64 = 0.0;
        let limit = solve_limit_monogamy_observed(
            &m.model,
            &s0,
            &LimitOptions::new(self.cfg.run.t_end, da).with_stride(stride),
            |field| {
                for (a, b) in field.female.iter().zip(&field.male) {
                    asymmetry = asymmetry.max((a - b).abs());
                }
            },
        )?;
        let rows: Vec<Vec<f64>> = limit
            .times
            .iter()
            .zip(&limit.snapshots)
            .map(|(&t, snap)| std::iter::once(t).chain(m.fs.iter().map(|f| snap.pair(f))).collect())
            .collect();
        let names = self.names();
        self.em.write_csv("monogamy_limit.csv", &header(&names, &["limit"]), &rows)?;
        let mono = self.mono.as_mut().unwrap();
        mono.limit = Some(limit);
        mono.asymmetry = asymmetry;
        Ok(())
    }

    fn monogamy_lln(&mut self) -> Result<()> {
        if self.mono().limit.is_none() {
            self.monogamy_limit()?;
        }
        let m = self.mono();
        let limit = m.limit.as_ref().unwrap();
        let reference: Vec<Vec<f64>> = m.fs.iter().map(|f| limit.series(f)).collect();
        if reference[0].len() != self.cfg.grid().len() {
            return Err(Error::contract("monogamy limit snapshots do not match the checkpoint grid"));
        }
        let asymmetry = m.asymmetry;
        let ks = self.cfg.run.k_list.clone();
        let mut errors = Vec::new();
        for &k in &ks {
            let series = self.mono_series(k)?;
            errors.push(sup_errors(&series, &reference, k));
        }
        let mut extra = Vec::new();
        if let Some(tol) = self.cfg.checks.symmetry {
            extra.push(check(
                "sex_symmetry",
                "single densities",
                self.cfg.run.t_end,
                asymmetry <= tol,
                asymmetry,
                tol,
                "largest |female - male| single density over all cells and steps".into(),
            ));
        }
        self.emit_lln(Stage::MonogamyLln, "monogamy_lln.csv", &ks, &errors, extra)
    }

    fn accounting(&mut self) -> Result<()> {
        let m = self.mono();
        let t_end = self.cfg.run.t_end;
        let mut rows = Vec::new();
        let mut jobs = Vec::new();
        for &k in &self.cfg.run.k_list {
            for r in 0..self.cfg.run.replicates as u64 {
                jobs.push((k, r));
            }
        }
        let results = ordered_map(self.workers, &jobs, |&(k, r)| {
            let s0 = m.initial.population(k)?;
            let opts = MonogamyOptions::new(t_end, k).with_grid(self.cfg.grid());
            match simulate_monogamy(&m.model, &s0, &opts, self.seed(), r) {
                Ok(traj) => match accounting_series(&traj) {
                    Ok(acc) => Ok((acc.deltas.len(), 0usize, String::new())),
                    Err(Error::Integrity(msg)) => Ok((traj.event_count, 1, msg)),
                    Err(e) => Err(e),
                },
                Err(Error::Integrity(msg)) => Ok((0, 1, msg)),
                Err(e) => Err(e),
            }
        })?;
        let mut events = 0usize;
        let mut violations = 0usize;
        let mut first = String::new();
        for (&(k, r), (n, v, msg)) in jobs.iter().zip(&results) {
            rows.push(vec![k as f64, r as f64, *n as f64, *v as f64]);
            events += n;
            violations += v;
            if first.is_empty() {
                first.clone_from(msg);
            }
        }
        self.em.write_csv(
            "accounting.csv",
            &["K".into(), "replicate".into(), "events".into(), "violations".into()],
            &rows,
        )?;
        let min = self.cfg.checks.min_events;
        let checks = vec![
            check(
                "audited_events",
                "head_count",
                t_end,
                events >= min,
                events as f64,
                min as f64,
                format!("{} trajectories replayed", jobs.len()),
            ),
            check(
                "audit_violations",
                "head_count",
                t_end,
                violations == 0,
                violations as f64,
                0.0,
                if first.is_empty() { "no violations".into() } else { first },
            ),
        ];
        self.emit_verdict(Stage::Accounting, Verdict::new(self.seed(), checks))
    }

    fn monogamy_fluct(&mut self) -> Result<()> {
        let m = self.mono();
        let c = &self.cfg.checks;
        let opts = MonogamyCheckOptions {
            workers: self.workers,
            flatness_max: c.flatness_max,
            bootstrap_resamples: c.bootstrap_resamples,
            ..MonogamyCheckOptions::new(
                self.cfg.run.t_end,
                self.cfg.run.k_list.clone(),
                self.cfg.run.replicates,
                self.da()?,
                self.seed(),
            )
        };
        let verdict = monogamy_fluct_check(&m.model, &m.initial, &m.fs, &opts)?;
        self.emit_verdict(Stage::MonogamyFluct, verdict)
    }
}

/// `(f, S_t)` from the limit at each grid time.
fn limit_reference(limit: &CohortTrajectory, fs: &[TestFunction], grid: &[f64]) -> Result<Vec<Vec<f64>>> {
    fs.iter()
        .map(|f| {
            grid.iter()
                .map(|&t| {
                    limit
                        .at(t)
                        .map(|m| m.pair(f))
                        .ok_or_else(|| Error::contract(format!("limit has no snapshot at t = {t}")))
                })
                .collect()
        })
        .collect()
}

/// Event-log dump: initial `(type, age)` pairs and the accepted events.
#[derive(Serialize)]
struct EventLog<'a> {
    k: u64,
    replicate: u64,
    master_seed: u64,
    t_end: f64,
    initial: Vec<(usize, f64)>,
    events: &'a [EventRecord],
}

#[derive(Serialize)]
struct MonogamyEventLog<'a> {
    k: u64,
    replicate: u64,
    master_seed: u64,
    t_end: f64,
    initial: Vec<CoupleState>,
    events: &'a [EventRecord],
}
