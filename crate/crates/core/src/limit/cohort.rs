use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{Population, RateModel, State, TestFunction};

/// A cohort of mass `mass` born at time `birth_time`; its age at clock `t`
/// is `t - birth_time`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Cohort {
    pub birth_time: f64,
    pub mass: f64,
}

/// Weighted-cohort representation of a deterministic measure, grouped by type
/// and ordered from oldest to youngest within each type.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CohortMeasure {
    pub clock: f64,
    pub types: Vec<Vec<Cohort>>,
}

impl CohortMeasure {
    pub fn empty(n_types: usize) -> Self {
        CohortMeasure {
            clock: 0.0,
            types: vec![Vec::new(); n_types],
        }
    }

    /// Builds a measure from `(state, mass)` atoms at clock 0.
    pub fn from_atoms(n_types: usize, atoms: &[(State, f64)]) -> Result<Self> {
        let mut m = CohortMeasure::empty(n_types);
        for (s, mass) in atoms {
            if s.kind >= n_types || !(s.age >= 0.0) || !(*mass >= 0.0) {
                return Err(Error::contract(format!("invalid cohort {s:?} with mass {mass}")));
            }
            m.types[s.kind].push(Cohort {
                birth_time: -s.age,
                mass: *mass,
            });
        }
        for cs in m.types.iter_mut() {
            cs.sort_by(|a, b| a.birth_time.total_cmp(&b.birth_time));
        }
        Ok(m)
    }

    /// `S / K` for a finite population.
    pub fn from_population(pop: &Population, n_types: usize, k: f64) -> Result<Self> {
        let atoms: Vec<(State, f64)> = pop.states().into_iter().map(|s| (s, 1.0 / k)).collect();
        let mut m = CohortMeasure::from_atoms(n_types, &atoms)?;
        m.clock = pop.clock;
        for cs in m.types.iter_mut() {
            for c in cs.iter_mut() {
                c.birth_time += pop.clock;
            }
        }
        Ok(m)
    }

    pub fn n_types(&self) -> usize {
        self.types.len()
    }

    pub fn len(&self) -> usize {
        self.types.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn total_mass(&self) -> f64 {
        self.types.iter().flatten().map(|c| c.mass).sum()
    }

    /// `(f, S)` as `sum mass * f(type, age)`.
    pub fn pair(&self, f: &TestFunction) -> f64 {
        let mut s = 0.0;
        for (kind, cs) in self.types.iter().enumerate() {
            for c in cs {
                s += c.mass * f.eval(kind, self.clock - c.birth_time);
            }
        }
        s
    }

    pub fn functionals(&self, model: &RateModel) -> Vec<f64> {
        model.spec.functionals.iter().map(|g| self.pair(g)).collect()
    }

    /// Cell masses on the grid `[c da, (c+1) da)`, per type; mass beyond the
    /// last cell lands in the last cell.
    pub fn bin(&self, da: f64, cells: usize) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; cells]; self.n_types()];
        for (kind, cs) in self.types.iter().enumerate() {
            for c in cs {
                let age = self.clock - c.birth_time;
                let j = ((age / da).max(0.0) as usize).min(cells - 1);
                out[kind][j] += c.mass;
            }
        }
        out
    }

    pub fn max_age(&self) -> f64 {
        self.types
            .iter()
            .flatten()
            .map(|c| self.clock - c.birth_time)
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug)]
pub struct LimitOptions {
    pub t_end: f64,
    pub dt: f64,
    /// Keep a snapshot every `record_stride` steps (and the final state).
    pub record_stride: usize,
    /// Relative mass floor below which cohorts merge into a neighbour.
    pub mass_floor: f64,
    /// Evaluate every rate at this fixed `phi` instead of the current one.
    pub frozen_phi: Option<Vec<f64>>,
}

impl LimitOptions {
    pub fn new(t_end: f64, dt: f64) -> Self {
        LimitOptions {
            t_end,
            dt,
            record_stride: 1,
            mass_floor: 1e-12,
            frozen_phi: None,
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.record_stride = stride.max(1);
        self
    }

    /// Stride that records at (multiples of) `interval`.
    pub fn recording_every(self, interval: f64) -> Self {
        let stride = (interval / self.dt).round() as usize;
        self.with_stride(stride)
    }

    pub(crate) fn steps(&self) -> Result<usize> {
        if !(self.dt > 0.0) {
            return Err(Error::contract("dt must be positive"));
        }
        if self.dt > self.t_end {
            return Err(Error::contract(format!(
                "dt = {} exceeds the horizon T = {}",
                self.dt, self.t_end
            )));
        }
        let steps = (self.t_end / self.dt).round() as usize;
        if ((steps as f64) * self.dt - self.t_end).abs() > 1e-9 * self.t_end {
            return Err(Error::contract("T must be an integer multiple of dt"));
        }
        Ok(steps)
    }
}

/// Snapshots of a limit solve, at times `times[j]`.
#[derive(Clone, Debug)]
pub struct CohortTrajectory {
    pub times: Vec<f64>,
    pub snapshots: Vec<CohortMeasure>,
    pub dt: f64,
}

impl CohortTrajectory {
    pub fn series(&self, f: &TestFunction) -> Vec<f64> {
        self.snapshots.iter().map(|s| s.pair(f)).collect()
    }

    /// Snapshot recorded at time `t` (within a small tolerance).
    pub fn at(&self, t: f64) -> Option<&CohortMeasure> {
        let tol = 1e-9 * (1.0 + t.abs());
        self.times
            .iter()
            .position(|&s| (s - t).abs() <= tol)
            .map(|j| &self.snapshots[j])
    }

    /// `(f, S_t)` at arbitrary `t`, linear in time between snapshots.
    pub fn value_at(&self, f: &TestFunction, t: f64) -> f64 {
        let j = self.times.partition_point(|&s| s <= t);
        if j == 0 {
            return self.snapshots[0].pair(f);
        }
        if j >= self.times.len() {
            return self.snapshots.last().unwrap().pair(f);
        }
        let (t0, t1) = (self.times[j - 1], self.times[j]);
        let w = (t - t0) / (t1 - t0);
        (1.0 - w) * self.snapshots[j - 1].pair(f) + w * self.snapshots[j].pair(f)
    }

    pub fn last(&self) -> &CohortMeasure {
        self.snapshots.last().unwrap()
    }
}

/// Weighted-cohort solver for the deterministic limit.
///
/// Each step transports cohorts exactly, applies survival `exp(-h dt)` with
/// `h` at the mid-step age and at `phi_mid = (phi(t) + phi(t + dt)) / 2`
/// (Heun predictor for `phi(t + dt)`), and adds one newborn cohort per type
/// at age `dt / 2`. The newborn mass integrates the birth intensity over the
/// step, including births by mothers born earlier in the same step.
pub fn solve_limit(model: &RateModel, s0: &CohortMeasure, opts: &LimitOptions) -> Result<CohortTrajectory> {
    let steps = opts.steps()?;
    if s0.n_types() != model.n_types() {
        return Err(Error::contract("initial measure has the wrong number of types"));
    }
    let mut cur = s0.clone();
    cur.clock = 0.0;
    let mut times = vec![0.0];
    let mut snapshots = vec![cur.clone()];
    let dt = opts.dt;
    for n in 0..steps {
        let t = n as f64 * dt;
        cur.clock = t;
        let phi0 = match &opts.frozen_phi {
            Some(p) => p.clone(),
            None => cur.functionals(model),
        };
        let phi_mid = match &opts.frozen_phi {
            Some(p) => p.clone(),
            None => {
                let predicted = cohort_step(model, &cur, t, dt, &phi0)?;
                let phi1 = predicted.functionals(model);
                phi0.iter().zip(&phi1).map(|(a, b)| 0.5 * (a + b)).collect()
            }
        };
        cur = cohort_step(model, &cur, t, dt, &phi_mid)?;
        merge_light_cohorts(&mut cur, opts.mass_floor);
        let done = n + 1;
        if done % opts.record_stride == 0 || done == steps {
            times.push(done as f64 * dt);
            snapshots.push(cur.clone());
        }
    }
    Ok(CohortTrajectory {
        times,
        snapshots,
        dt,
    })
}

fn cohort_step(model: &RateModel, cur: &CohortMeasure, t: f64, dt: f64, phi: &[f64]) -> Result<CohortMeasure> {
    let k = model.n_types();
    let mid = t + 0.5 * dt;
    let mut next = CohortMeasure {
        clock: t + dt,
        types: Vec::with_capacity(k),
    };
    // Birth intensity at mid-step from cohorts alive at the start of the step.
    let mut births = vec![0.0; k];
    for (kind, cs) in cur.types.iter().enumerate() {
        let mut out = Vec::with_capacity(cs.len() + 1);
        let m_bear = model.bearing(kind).mean();
        let m_split = model.splitting(kind).mean();
        let fertile = m_bear.iter().any(|&m| m != 0.0);
        for c in cs {
            let age = mid - c.birth_time;
            let h = model.death_rate(kind, age, phi);
            let half = (-0.5 * dt * h).exp();
            let b = if fertile { model.birth_rate(kind, age, phi) } else { 0.0 };
            for (i, acc) in births.iter_mut().enumerate() {
                *acc += c.mass * half * (b * m_bear[i] + h * m_split[i]);
            }
            let mass = c.mass * half * half;
            if mass < 0.0 || mass.is_nan() {
                return Err(Error::Integrity(format!("cohort mass became {mass}")));
            }
            out.push(Cohort {
                birth_time: c.birth_time,
                mass,
            });
        }
        next.types.push(out);
    }
    // Mothers born during the step contribute on average for half the step.
    let mut within = vec![0.0; k];
    for (j, bj) in births.iter().enumerate() {
        if *bj == 0.0 {
            continue;
        }
        let s = State::new(j, 0.25 * dt);
        for (i, w) in within.iter_mut().enumerate() {
            *w += 0.5 * dt * bj * model.n(i, s, phi);
        }
    }
    for i in 0..k {
        let total = births[i] + within[i];
        if total > 0.0 {
            let h = model.death_rate(i, 0.25 * dt, phi);
            next.types[i].push(Cohort {
                birth_time: mid,
                mass: dt * total * (-0.5 * dt * h).exp(),
            });
        }
    }
    Ok(next)
}

/// Merges cohorts lighter than `floor * total` into the nearest same-type
/// neighbour, conserving mass and the mass-weighted birth time.
pub fn merge_light_cohorts(m: &mut CohortMeasure, floor: f64) {
    let threshold = floor * m.total_mass();
    if threshold <= 0.0 {
        return;
    }
    for cs in m.types.iter_mut() {
        if cs.len() < 2 || cs.iter().all(|c| c.mass >= threshold) {
            continue;
        }
        let mut merged: Vec<Cohort> = Vec::with_capacity(cs.len());
        let mut carry: Option<Cohort> = None;
        for &c in cs.iter() {
            let c = match carry.take() {
                Some(p) => combine(p, c),
                None => c,
            };
            if c.mass < threshold {
                carry = Some(c);
            } else {
                merged.push(c);
            }
        }
        if let Some(p) = carry {
            match merged.last_mut() {
                Some(last) => *last = combine(*last, p),
                None => merged.push(p),
            }
        }
        *cs = merged;
    }
}

fn combine(a: Cohort, b: Cohort) -> Cohort {
    let mass = a.mass + b.mass;
    let birth_time = if mass > 0.0 {
        (a.mass * a.birth_time + b.mass * b.birth_time) / mass
    } else {
        b.birth_time
    };
    Cohort { birth_time, mass }
}
