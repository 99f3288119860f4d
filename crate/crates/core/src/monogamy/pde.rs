use nalgebra::{Matrix2, Vector2};

use super::model::{MonogamyModel, PairProfile};
use super::population::MonogamyInitial;
use crate::error::{Error, Result};
use crate::limit::LimitOptions;
use crate::model::{AgeFn, Dependence, PairTestFunction};

/// Single-female, single-male and couple densities on an aligned age grid.
/// `couple[j * cells + l]` is the density at `(v_j, w_l)` per unit area.
#[derive(Clone, Debug, PartialEq)]
pub struct TwoSexDensity {
    pub clock: f64,
    pub da: f64,
    pub female: Vec<f64>,
    pub male: Vec<f64>,
    pub couple: Vec<f64>,
}

impl TwoSexDensity {
    pub fn zeros(da: f64, cells: usize) -> Self {
        TwoSexDensity {
            clock: 0.0,
            da,
            female: vec![0.0; cells],
            male: vec![0.0; cells],
            couple: vec![0.0; cells * cells],
        }
    }

    /// Cell averages of a banded initial condition.
    pub fn from_initial(ic: &MonogamyInitial, da: f64, cells: usize) -> Result<Self> {
        ic.validate()?;
        let mut out = TwoSexDensity::zeros(da, cells);
        let overlap = |j: usize, lo: f64, hi: f64| {
            let (a, b) = (j as f64 * da, (j + 1) as f64 * da);
            (b.min(hi) - a.max(lo)).max(0.0) / da
        };
        for (bands, target) in [(&ic.females, &mut out.female), (&ic.males, &mut out.male)] {
            for b in bands {
                let rho = b.mass / (b.age_hi - b.age_lo);
                for (j, d) in target.iter_mut().enumerate() {
                    *d += rho * overlap(j, b.age_lo, b.age_hi);
                }
            }
        }
        for b in &ic.couples {
            let rho = b.mass / ((b.v_hi - b.v_lo) * (b.w_hi - b.w_lo));
            for j in 0..cells {
                let ov = overlap(j, b.v_lo, b.v_hi);
                if ov == 0.0 {
                    continue;
                }
                for l in 0..cells {
                    out.couple[j * cells + l] += rho * ov * overlap(l, b.w_lo, b.w_hi);
                }
            }
        }
        Ok(out)
    }

    pub fn cells(&self) -> usize {
        self.female.len()
    }

    #[inline]
    pub fn midpoint(&self, j: usize) -> f64 {
        (j as f64 + 0.5) * self.da
    }

    #[inline]
    pub fn couple_at(&self, j: usize, l: usize) -> f64 {
        self.couple[j * self.cells() + l]
    }

    fn ages(&self) -> Vec<f64> {
        (0..self.cells()).map(|j| self.midpoint(j)).collect()
    }

    /// `(f, S)` by the midpoint rule.
    pub fn pair(&self, f: &PairTestFunction) -> f64 {
        let ages = self.ages();
        let da = self.da;
        let singles: f64 = self
            .female
            .iter()
            .zip(&ages)
            .map(|(d, &v)| if *d == 0.0 { 0.0 } else { d * f.female_value(v) })
            .sum::<f64>()
            + self
                .male
                .iter()
                .zip(&ages)
                .map(|(d, &w)| if *d == 0.0 { 0.0 } else { d * f.male_value(w) })
                .sum::<f64>();
        let n = self.cells();
        let mut couples = 0.0;
        for t in &f.couple {
            let g = tabulate(&t.female, &ages);
            let k = tabulate(&t.male, &ages);
            let mut s = 0.0;
            for j in 0..n {
                if g[j] == 0.0 {
                    continue;
                }
                let row = &self.couple[j * n..(j + 1) * n];
                s += g[j] * row.iter().zip(&k).map(|(c, kv)| c * kv).sum::<f64>();
            }
            couples += t.coef * s;
        }
        singles * da + couples * da * da
    }

    pub fn functionals(&self, model: &MonogamyModel) -> Vec<f64> {
        model.spec.functionals.iter().map(|g| self.pair(g)).collect()
    }

    /// `[F, M, FM]` masses.
    pub fn masses(&self) -> [f64; 3] {
        let da = self.da;
        [
            self.female.iter().sum::<f64>() * da,
            self.male.iter().sum::<f64>() * da,
            self.couple.iter().sum::<f64>() * da * da,
        ]
    }

    /// Head count `X = F + M + 2 FM`.
    pub fn head_count(&self) -> f64 {
        let [f, m, c] = self.masses();
        f + m + 2.0 * c
    }

    fn min_value(&self) -> f64 {
        self.female
            .iter()
            .chain(&self.male)
            .chain(&self.couple)
            .fold(f64::INFINITY, |a, &b| a.min(b))
    }
}

fn tabulate(f: &AgeFn, ages: &[f64]) -> Vec<f64> {
    ages.iter().map(|&a| f.value(a)).collect()
}

/// A separable pair rate tabulated on the grid and scaled by its dependence.
struct Table {
    scale: f64,
    fv: Vec<f64>,
    mw: Vec<f64>,
}

impl Table {
    fn new(p: &PairProfile, dep: &Dependence, phi: &[f64], ages: &[f64]) -> Self {
        let scale = if p.scale == 0.0 { 0.0 } else { p.scale * dep.factor(phi) };
        Table {
            scale,
            fv: tabulate(&p.female, ages),
            mw: tabulate(&p.male, ages),
        }
    }

    #[inline]
    fn at(&self, j: usize, l: usize) -> f64 {
        if self.scale == 0.0 {
            0.0
        } else {
            self.scale * self.fv[j] * self.mw[l]
        }
    }

    fn is_zero(&self) -> bool {
        self.scale == 0.0
    }
}

#[derive(Clone, Debug)]
pub struct MonogamyLimit {
    pub times: Vec<f64>,
    pub snapshots: Vec<TwoSexDensity>,
}

impl MonogamyLimit {
    pub fn series(&self, f: &PairTestFunction) -> Vec<f64> {
        self.snapshots.iter().map(|s| s.pair(f)).collect()
    }

    pub fn last(&self) -> &TwoSexDensity {
        self.snapshots.last().expect("at least the initial snapshot")
    }

    /// Snapshot recorded at time `t`, if any.
    pub fn at(&self, t: f64) -> Option<&TwoSexDensity> {
        self.times
            .iter()
            .position(|&s| (s - t).abs() <= 1e-9 * t.abs().max(1.0))
            .map(|i| &self.snapshots[i])
    }
}

/// Solves the coupled singles/couples system on an aligned grid (`dt = da`).
///
/// Each step shifts singles along the age axis and couples along the
/// diagonal, applies survival at the mid-step ages, deposits widowed and
/// separated partners into the singles they become, exchanges marriage mass
/// with a conservative Heun step and fills the newborn cells from the
/// trapezoidal renewal flux. Without couples and marriage the singles update
/// coincides with the two-sex density solver.
pub fn solve_limit_monogamy(
    model: &MonogamyModel,
    s0: &TwoSexDensity,
    opts: &LimitOptions,
) -> Result<MonogamyLimit> {
    solve_limit_monogamy_observed(model, s0, opts, |_| {})
}

/// As [`solve_limit_monogamy`], calling `observe` on the field at every step
/// time `0, dt, ..., T`.
pub fn solve_limit_monogamy_observed(
    model: &MonogamyModel,
    s0: &TwoSexDensity,
    opts: &LimitOptions,
    mut observe: impl FnMut(&TwoSexDensity),
) -> Result<MonogamyLimit> {
    let steps = opts.steps()?;
    if ((opts.dt - s0.da) / s0.da).abs() > 1e-12 {
        return Err(Error::contract(format!(
            "monogamy solver needs dt = da, got dt = {} and da = {}",
            opts.dt, s0.da
        )));
    }
    let n0 = s0.cells();
    if s0.male.len() != n0 || s0.couple.len() != n0 * n0 {
        return Err(Error::contract("inconsistent monogamy field sizes"));
    }
    let cells = n0 + steps + 1;
    let mut cur = TwoSexDensity::zeros(s0.da, cells);
    cur.female[..n0].copy_from_slice(&s0.female);
    cur.male[..n0].copy_from_slice(&s0.male);
    for j in 0..n0 {
        cur.couple[j * cells..j * cells + n0].copy_from_slice(&s0.couple[j * n0..(j + 1) * n0]);
    }
    let mut times = vec![0.0];
    let mut snapshots = vec![cur.clone()];
    observe(&cur);
    for n in 0..steps {
        cur.clock = n as f64 * opts.dt;
        // Cells beyond the initial support plus the steps taken are empty.
        let active = (n0 + n).min(cells);
        let phi0 = match &opts.frozen_phi {
            Some(p) => p.clone(),
            None => cur.functionals(model),
        };
        let phi_mid = match &opts.frozen_phi {
            Some(p) => p.clone(),
            None => {
                let predicted = step(model, &cur, active, &phi0, &phi0, &phi0)?;
                let phi1 = predicted.functionals(model);
                phi0.iter().zip(&phi1).map(|(a, b)| 0.5 * (a + b)).collect()
            }
        };
        let phi1: Vec<f64> = phi_mid.iter().zip(&phi0).map(|(m, a)| 2.0 * m - a).collect();
        cur = step(model, &cur, active, &phi0, &phi_mid, &phi1)?;
        let lowest = cur.min_value();
        if lowest < -1e-10 {
            return Err(Error::numerical(format!(
                "negative density {lowest:e} at t = {}",
                cur.clock
            )));
        }
        observe(&cur);
        let done = n + 1;
        if done % opts.record_stride == 0 || done == steps {
            times.push(done as f64 * opts.dt);
            snapshots.push(cur.clone());
        }
    }
    Ok(MonogamyLimit { times, snapshots })
}

fn step(
    model: &MonogamyModel,
    cur: &TwoSexDensity,
    active: usize,
    phi0: &[f64],
    phi_mid: &[f64],
    phi1: &[f64],
) -> Result<TwoSexDensity> {
    let s = &model.spec;
    let n = cur.cells();
    let da = cur.da;
    let dt = da;
    let mut next = TwoSexDensity::zeros(da, n);
    next.clock = cur.clock + dt;
    let start: Vec<f64> = (0..n).map(|j| cur.midpoint(j)).collect();
    let mid: Vec<f64> = start.iter().map(|a| a + 0.5 * dt).collect();
    let single_mean = model.single_litter().mean();
    let couple_mean = model.couple_litter().mean();

    // Renewal flux at the start of the step.
    let mut flux_start = [0.0; 2];
    let bc0 = Table::new(&s.couple_birth, &s.birth_dependence, phi0, &start);
    for j in 0..active {
        let d = cur.female[j];
        if d != 0.0 {
            let b = model.single_birth(start[j], phi0);
            for (i, f) in flux_start.iter_mut().enumerate() {
                *f += d * da * (b * single_mean[i]);
            }
        }
    }
    if !bc0.is_zero() {
        let mut births = 0.0;
        for j in 0..active {
            let row = &cur.couple[j * n..j * n + active];
            births += bc0.fv[j] * row.iter().zip(&bc0.mw).map(|(c, k)| c * k).sum::<f64>();
        }
        for (i, f) in flux_start.iter_mut().enumerate() {
            *f += bc0.scale * births * da * da * couple_mean[i];
        }
    }

    // Singles: shift and survive.
    for (src, dst, female) in [(&cur.female, &mut next.female, true), (&cur.male, &mut next.male, false)] {
        for j in 0..active {
            let d = src[j];
            if d == 0.0 {
                continue;
            }
            if j + 1 >= n {
                return Err(Error::Integrity("single aged past the grid".into()));
            }
            let h = if female {
                model.female_death(mid[j], phi_mid)
            } else {
                model.male_death(mid[j], phi_mid)
            };
            dst[j + 1] = d * (-dt * h).exp();
        }
    }

    // Couples: diagonal shift, survival, widowing and separation deposits.
    let hf = Table::new(&s.female_death_married, &s.death_dependence, phi_mid, &mid);
    let hm = Table::new(&s.male_death_married, &s.death_dependence, phi_mid, &mid);
    let sep = Table::new(&s.separation, &s.death_dependence, phi_mid, &mid);
    let mut to_female = vec![0.0; n];
    let mut to_male = vec![0.0; n];
    for j in 0..active {
        for l in 0..active {
            let c = cur.couple[j * n + l];
            if c == 0.0 {
                continue;
            }
            if j + 1 >= n || l + 1 >= n {
                return Err(Error::Integrity("couple aged past the grid".into()));
            }
            let (f_dies, m_dies, splits) = (hf.at(j, l), hm.at(j, l), sep.at(j, l));
            let total = f_dies + m_dies + splits;
            let survive = (-dt * total).exp();
            next.couple[(j + 1) * n + l + 1] = c * survive;
            if total > 0.0 {
                let lost = c * (1.0 - survive) / total;
                to_female[j + 1] += lost * (m_dies + splits);
                to_male[l + 1] += lost * (f_dies + splits);
            }
        }
    }
    for j in 0..n {
        if to_female[j] != 0.0 {
            next.female[j] += to_female[j] * da;
        }
        if to_male[j] != 0.0 {
            next.male[j] += to_male[j] * da;
        }
    }

    // Marriage exchange, conservative Heun on F' = -F int rho M, C' = rho F M.
    // After the shift, cell j holds the cohort whose mid-step age is mid[j - 1].
    let rho = Table::new(&s.marriage, &s.marriage_dependence, phi_mid, &mid);
    if !rho.is_zero() {
        let lo = 1;
        let hi = (active + 1).min(n);
        let rate = |f: &[f64], m: &[f64], out_f: &mut [f64], out_m: &mut [f64], flow: &mut [f64], w: f64| {
            for j in lo..hi {
                if f[j] == 0.0 {
                    continue;
                }
                for l in lo..hi {
                    if m[l] == 0.0 {
                        continue;
                    }
                    let mu = w * rho.at(j - 1, l - 1) * f[j] * m[l];
                    flow[j * n + l] += mu;
                    out_f[j] += mu;
                    out_m[l] += mu;
                }
            }
        };
        let mut flow = vec![0.0; n * n];
        let mut loss_f = vec![0.0; n];
        let mut loss_m = vec![0.0; n];
        rate(&next.female, &next.male, &mut loss_f, &mut loss_m, &mut flow, 1.0);
        let fp: Vec<f64> = next.female.iter().zip(&loss_f).map(|(f, l)| f - dt * da * l).collect();
        let mp: Vec<f64> = next.male.iter().zip(&loss_m).map(|(m, l)| m - dt * da * l).collect();
        for x in flow.iter_mut() {
            *x *= 0.5;
        }
        loss_f.iter_mut().for_each(|x| *x *= 0.5);
        loss_m.iter_mut().for_each(|x| *x *= 0.5);
        rate(&fp, &mp, &mut loss_f, &mut loss_m, &mut flow, 0.5);
        for j in lo..hi {
            next.female[j] -= dt * da * loss_f[j];
            next.male[j] -= dt * da * loss_m[j];
            for l in lo..hi {
                next.couple[j * n + l] += dt * flow[j * n + l];
            }
        }
    }

    // Renewal flux at the end of the step, excluding the newborn cells.
    let end: Vec<f64> = (0..n).map(|j| next.midpoint(j)).collect();
    let mut flux_end = [0.0; 2];
    let hi = (active + 1).min(n);
    for j in 1..hi {
        let d = next.female[j];
        if d != 0.0 {
            let b = model.single_birth(end[j], phi1);
            for (i, f) in flux_end.iter_mut().enumerate() {
                *f += d * da * (b * single_mean[i]);
            }
        }
    }
    let bc1 = Table::new(&s.couple_birth, &s.birth_dependence, phi1, &end);
    if !bc1.is_zero() {
        let mut births = 0.0;
        for j in 1..hi {
            let row = &next.couple[j * n + 1..j * n + hi];
            births += bc1.fv[j] * row.iter().zip(&bc1.mw[1..hi]).map(|(c, k)| c * k).sum::<f64>();
        }
        for (i, f) in flux_end.iter_mut().enumerate() {
            *f += bc1.scale * births * da * da * couple_mean[i];
        }
    }

    // Boundary masses m solve m = dt/2 (B0 e^{-h dt} + B1 + N m); only a
    // newborn single female can contribute to N.
    let h0 = [model.female_death(0.0, phi_mid), model.male_death(0.0, phi_mid)];
    let b_new = model.single_birth(0.5 * da, phi1);
    let mut a = Matrix2::<f64>::identity();
    let mut rhs = Vector2::<f64>::zeros();
    for i in 0..2 {
        rhs[i] = 0.5 * dt * (flux_start[i] * (-dt * h0[i]).exp() + flux_end[i]);
        a[(i, 0)] -= 0.5 * dt * (b_new * single_mean[i]);
    }
    let masses = a
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::numerical("boundary system is singular"))?;
    next.female[0] = masses[0] / da;
    next.male[0] = masses[1] / da;
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::monogamy::model::MonogamySpec;
    use crate::monogamy::population::{CoupleBand, SingleBand};

    fn singles(mass: f64) -> MonogamyInitial {
        MonogamyInitial {
            females: vec![SingleBand {
                age_lo: 0.0,
                age_hi: 2.0,
                mass,
            }],
            males: vec![SingleBand {
                age_lo: 0.0,
                age_hi: 2.0,
                mass,
            }],
            couples: vec![],
        }
    }

    #[test]
    fn marriage_only_conserves_head_count() {
        let model = MonogamyModel::new(MonogamySpec::constant(0.0, 0.0, 0.0, 0.0, 1.5)).unwrap();
        let da = 0.02;
        let s0 = TwoSexDensity::from_initial(&singles(1.0), da, 100).unwrap();
        let x0 = s0.head_count();
        let sol = solve_limit_monogamy(&model, &s0, &LimitOptions::new(2.0, da)).unwrap();
        for s in &sol.snapshots {
            assert!(((s.head_count() - x0) / x0).abs() < 1e-8 * 2.0);
        }
        // Marriage-only totals: F = M = 1 / (1 + rho t).
        let [f, m, c] = sol.last().masses();
        let exact = 1.0 / (1.0 + 1.5 * 2.0);
        assert!((f - exact).abs() < 1e-3, "{f} vs {exact}");
        assert!((m - f).abs() < 1e-12);
        assert!((c - (1.0 - exact)).abs() < 1e-3);
    }

    #[test]
    fn separation_only_couples_decay_into_singles() {
        let model = MonogamyModel::new(MonogamySpec::constant(0.0, 0.0, 0.0, 0.4, 0.0)).unwrap();
        let ic = MonogamyInitial {
            couples: vec![CoupleBand {
                v_lo: 0.0,
                v_hi: 1.0,
                w_lo: 0.5,
                w_hi: 1.5,
                mass: 1.0,
            }],
            ..MonogamyInitial::default()
        };
        let da = 0.01;
        let s0 = TwoSexDensity::from_initial(&ic, da, 200).unwrap();
        let sol = solve_limit_monogamy(&model, &s0, &LimitOptions::new(1.0, da)).unwrap();
        let [f, m, c] = sol.last().masses();
        let exact = (-0.4f64).exp();
        assert!((c - exact).abs() < 1e-12);
        assert!((f - (1.0 - exact)).abs() < 1e-12 && (m - f).abs() < 1e-12);
        // Separated males keep the older partner's ages: mean age 1.0 + t.
        let mean_w = sol.last().pair(&PairTestFunction::new(
            "male_age",
            AgeFn::constant(0.0),
            AgeFn::linear(0.0, 1.0),
            vec![],
        )) / m;
        assert!((mean_w - 2.0).abs() < 0.01, "{mean_w}");
    }

    #[test]
    fn negative_density_is_numerical_error() {
        // Marriage far too fast for the step.
        let model = MonogamyModel::new(MonogamySpec::constant(0.0, 0.0, 0.0, 0.0, 1e4)).unwrap();
        let da = 0.05;
        let s0 = TwoSexDensity::from_initial(&singles(1.0), da, 40).unwrap();
        let r = solve_limit_monogamy(&model, &s0, &LimitOptions::new(1.0, da));
        assert!(matches!(r, Err(Error::Numerical(_))));
    }

    fn logistic(rho: f64) -> MonogamySpec {
        let h = AgeFn::linear(0.2, 0.1);
        let fertility = AgeFn::Product {
            factors: vec![AgeFn::constant(2.0), AgeFn::window(0.5, 2.5, 0.5)],
        };
        let mut spec = MonogamySpec::constant(0.0, 0.0, 0.0, 0.0, rho);
        spec.female_death = h.clone();
        spec.male_death = h;
        spec.single_birth = fertility;
        spec.functionals = vec![PairTestFunction::head_count()];
        spec.birth_dependence = Dependence::Logistic {
            functional: 0,
            capacity: 3.0,
        };
        spec
    }

    #[test]
    fn without_marriage_reduces_to_two_sex_density_solver() {
        use crate::limit::solve_density_2sex;
        use crate::model::builtin::TwoSexLogistic;
        use crate::model::{InitialBand, InitialCondition, RateModel};

        let model = MonogamyModel::new(logistic(0.0)).unwrap();
        let base = RateModel::new(TwoSexLogistic::default().spec()).unwrap();
        let da = 0.02;
        let s0 = TwoSexDensity::from_initial(&singles(1.0), da, 100).unwrap();
        let ic = InitialCondition::new(
            (0..2)
                .map(|kind| InitialBand {
                    kind,
                    age_lo: 0.0,
                    age_hi: 2.0,
                    mass: 1.0,
                })
                .collect(),
        );
        let d0 = ic.density(2, da, 100).unwrap();
        let opts = LimitOptions::new(3.0, da).with_stride(25);
        let ours = solve_limit_monogamy(&model, &s0, &opts).unwrap();
        let theirs = solve_density_2sex(&base, &d0, &opts).unwrap();
        assert_eq!(ours.times, theirs.times);
        for (a, b) in ours.snapshots.iter().zip(&theirs.snapshots) {
            assert!(a.couple.iter().all(|&c| c == 0.0));
            for (x, y) in a.female.iter().zip(&b.densities[0]).chain(a.male.iter().zip(&b.densities[1])) {
                assert!((x - y).abs() <= 1e-10, "{x} vs {y} at t = {}", a.clock);
            }
        }
    }

    #[test]
    fn symmetric_model_keeps_sexes_equal() {
        let mut spec = logistic(1.2);
        // Symmetric births: couples only, one child of either sex.
        spec.single_birth = AgeFn::constant(0.0);
        spec.couple_birth = PairProfile {
            scale: 2.0,
            female: AgeFn::window(0.5, 2.5, 0.5),
            male: AgeFn::window(0.5, 2.5, 0.5),
        };
        spec.female_death_married = PairProfile {
            scale: 1.0,
            female: AgeFn::linear(0.1, 0.1),
            male: AgeFn::linear(1.0, 0.2),
        };
        spec.male_death_married = PairProfile {
            scale: 1.0,
            female: AgeFn::linear(1.0, 0.2),
            male: AgeFn::linear(0.1, 0.1),
        };
        spec.separation = PairProfile {
            scale: 0.3,
            female: AgeFn::linear(1.0, 0.1),
            male: AgeFn::linear(1.0, 0.1),
        };
        spec.marriage = PairProfile {
            scale: 1.2,
            female: AgeFn::window(0.3, 3.0, 0.3),
            male: AgeFn::window(0.3, 3.0, 0.3),
        };
        let model = MonogamyModel::new(spec).unwrap();
        let mut ic = singles(1.0);
        ic.couples.push(CoupleBand {
            v_lo: 0.5,
            v_hi: 1.5,
            w_lo: 0.5,
            w_hi: 1.5,
            mass: 0.5,
        });
        let da = 0.02;
        let s0 = TwoSexDensity::from_initial(&ic, da, 100).unwrap();
        let sol = solve_limit_monogamy(&model, &s0, &LimitOptions::new(3.0, da).with_stride(10)).unwrap();
        let n = sol.last().cells();
        for s in &sol.snapshots {
            for (x, y) in s.female.iter().zip(&s.male) {
                assert!((x - y).abs() <= 1e-10);
            }
            for j in 0..n {
                for l in 0..j {
                    assert!((s.couple_at(j, l) - s.couple_at(l, j)).abs() <= 1e-10);
                }
            }
        }
        let m = sol.last().masses();
        assert!(m[2] > 0.01, "{m:?}");
    }

    #[test]
    fn misaligned_grid_rejected() {
        let model = MonogamyModel::new(MonogamySpec::constant(0.0, 0.0, 0.1, 0.0, 1.0)).unwrap();
        let s0 = TwoSexDensity::from_initial(&singles(1.0), 0.02, 100).unwrap();
        assert!(solve_limit_monogamy(&model, &s0, &LimitOptions::new(1.0, 0.01)).is_err());
    }
}
