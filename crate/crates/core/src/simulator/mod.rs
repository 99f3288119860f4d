//! Exact event-driven simulation by thinning of bounded intensities.

pub mod martingale;

use rand::Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Population, RateModel, State, TestFunction};
use crate::rng::{self, StreamRng};

pub use martingale::{MartingaleAnalyzer, MartingaleSeries};

pub const DEFAULT_POPULATION_CAP: usize = 10_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EventKind {
    Bearing,
    SplitDeath,
    PlainDeath,
    Immigration,
    Marriage,
    Separation,
    Widowing,
}

/// One accepted event. `subject` is the acting individual (for marriages the
/// female, with the male in `partner`); immigrations have no subject.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub time: f64,
    pub kind: EventKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub subject: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub partner: Option<u64>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub offspring: Vec<u32>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub immigrants: Vec<State>,
}

#[derive(Clone, Debug)]
pub struct SimOptions {
    pub t_end: f64,
    pub k: u64,
    /// Sample times for the observable series; must lie in `[0, t_end]`.
    pub grid: Vec<f64>,
    pub observables: Vec<TestFunction>,
    pub record_events: bool,
    pub population_cap: usize,
}

impl SimOptions {
    pub fn new(t_end: f64, k: u64) -> Self {
        SimOptions {
            t_end,
            k,
            grid: uniform_grid(t_end, 20),
            observables: vec![TestFunction::total()],
            record_events: true,
            population_cap: DEFAULT_POPULATION_CAP,
        }
    }

    pub fn with_grid(mut self, grid: Vec<f64>) -> Self {
        self.grid = grid;
        self
    }

    pub fn with_observables(mut self, observables: Vec<TestFunction>) -> Self {
        self.observables = observables;
        self
    }

    pub fn without_events(mut self) -> Self {
        self.record_events = false;
        self
    }
}

/// `intervals + 1` equally spaced times covering `[0, t_end]`.
pub fn uniform_grid(t_end: f64, intervals: usize) -> Vec<f64> {
    (0..=intervals)
        .map(|j| t_end * j as f64 / intervals as f64)
        .collect()
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    pub k: u64,
    pub t_end: f64,
    pub master_seed: u64,
    pub replicate: u64,
    /// Maximal age at time zero, including the immigration kernel's support.
    pub a_star: f64,
    pub initial: Population,
    pub events: Vec<EventRecord>,
    pub event_count: usize,
    pub candidates: u64,
    pub grid: Vec<f64>,
    pub observable_names: Vec<String>,
    /// `series[j][g]` is `(f_j, S_t)` at `grid[g]`.
    pub series: Vec<Vec<f64>>,
    pub final_population: Population,
}

impl Trajectory {
    pub fn omega(&self) -> f64 {
        self.t_end + self.a_star
    }

    /// Final value of observable `j`.
    pub fn final_value(&self, j: usize) -> f64 {
        *self.series[j].last().expect("grid is non-empty")
    }
}

/// Tracks `phi` incrementally when the functionals ignore age.
pub(crate) struct PhiTracker<'a> {
    model: &'a RateModel,
    k: f64,
    phi: Vec<f64>,
}

impl<'a> PhiTracker<'a> {
    pub(crate) fn new(model: &'a RateModel, k: f64) -> Self {
        PhiTracker {
            model,
            k,
            phi: vec![0.0; model.n_functionals()],
        }
    }

    pub(crate) fn update(&mut self, pop: &Population) -> &[f64] {
        match self.model.age_free_functionals() {
            Some(weights) => {
                let counts = pop.type_counts();
                for (j, w) in weights.iter().enumerate() {
                    self.phi[j] = w
                        .iter()
                        .zip(counts)
                        .map(|(wk, &c)| wk * c as f64)
                        .sum::<f64>()
                        / self.k;
                }
            }
            None => {
                for (j, g) in self.model.spec.functionals.iter().enumerate() {
                    self.phi[j] = pop.pair(g) / self.k;
                }
            }
        }
        &self.phi
    }
}

fn check_bound(quantity: &'static str, value: f64, bound: f64, s: State, phi: &[f64]) -> Result<()> {
    if value > bound * (1.0 + 1e-12) || value.is_nan() {
        return Err(Error::BoundViolation {
            quantity,
            value,
            bound,
            diagnostic: format!("state type {} age {:.6}, phi {:?}", s.kind, s.age, phi),
        });
    }
    Ok(())
}

/// Simulates one trajectory on the stream `(master_seed, K, replicate)`.
pub fn simulate(
    model: &RateModel,
    s0: &Population,
    opts: &SimOptions,
    master_seed: u64,
    replicate: u64,
) -> Result<Trajectory> {
    let mut rng = rng::stream(master_seed, opts.k, replicate);
    let mut traj = simulate_with_rng(model, s0, opts, &mut rng)?;
    traj.master_seed = master_seed;
    traj.replicate = replicate;
    Ok(traj)
}

pub fn simulate_with_rng(
    model: &RateModel,
    s0: &Population,
    opts: &SimOptions,
    rng: &mut StreamRng,
) -> Result<Trajectory> {
    if !(opts.t_end > 0.0) {
        return Err(Error::contract("horizon T must be positive"));
    }
    if opts.k == 0 {
        return Err(Error::contract("K must be a positive integer"));
    }
    if opts.grid.iter().any(|&t| t < 0.0 || t > opts.t_end)
        || opts.grid.windows(2).any(|w| w[1] < w[0])
        || opts.grid.is_empty()
    {
        return Err(Error::contract("sample grid must be sorted, non-empty, within [0, T]"));
    }
    if s0.clock != 0.0 {
        return Err(Error::contract("initial population must have clock 0"));
    }
    let immigration = model.immigration();
    if s0.is_empty() && immigration.is_none() {
        return Err(Error::contract("empty initial population without immigration"));
    }
    let a_star = s0
        .max_age()
        .max(immigration.map(|im| im.max_age()).unwrap_or(0.0));
    let omega = opts.t_end + a_star;
    let b_max = model.b_bound(omega)?;
    let h_max = model.h_bound(omega)?;
    let g_max = model.g_bound()?;
    let batch = match immigration {
        Some(im) => Some(match &im.batch {
            crate::model::BatchLaw::Deterministic { size } => {
                crate::model::OffspringLaw::Deterministic { counts: vec![*size] }.compile(1)?
            }
            crate::model::BatchLaw::Poisson { mean, cap } => crate::model::OffspringLaw::Poisson {
                means: vec![*mean],
                cap: *cap,
            }
            .compile(1)?,
        }),
        None => None,
    };
    let slice = b_max + h_max;
    let n_types = model.n_types();
    let k = opts.k as f64;

    let mut pop = s0.clone();
    let mut phi_tracker = PhiTracker::new(model, k);
    let mut events = Vec::new();
    let mut event_count = 0usize;
    let mut candidates = 0u64;
    let mut series = vec![Vec::with_capacity(opts.grid.len()); opts.observables.len()];
    let mut next_grid = 0usize;
    let mut newborn_buf: Vec<u32> = Vec::with_capacity(n_types);

    loop {
        let n = pop.len();
        let total = slice * n as f64 + g_max;
        let t_next = if total > 0.0 {
            let e: f64 = rng.sample(Exp1);
            pop.clock + e / total
        } else {
            f64::INFINITY
        };
        let now = pop.clock;
        while next_grid < opts.grid.len() && opts.grid[next_grid] < t_next {
            pop.clock = opts.grid[next_grid];
            for (j, f) in opts.observables.iter().enumerate() {
                series[j].push(pop.pair(f));
            }
            next_grid += 1;
        }
        pop.clock = now;
        if t_next > opts.t_end {
            pop.clock = opts.t_end;
            break;
        }
        pop.clock = t_next;
        candidates += 1;
        let u = rng.random::<f64>() * total;
        let individual_mass = slice * n as f64;
        let record = if u < individual_mass {
            let idx = ((u / slice) as usize).min(n - 1);
            let offset = u - idx as f64 * slice;
            let s = pop.state(idx);
            let phi = phi_tracker.update(&pop);
            let b = model.birth_rate(s.kind, s.age, phi);
            check_bound("b", b, b_max, s, phi)?;
            if offset < b {
                let id = pop.members()[idx].id;
                newborn_buf.clear();
                newborn_buf.extend_from_slice(model.bearing(s.kind).sample(rng));
                add_newborns(&mut pop, &newborn_buf);
                Some(EventRecord {
                    time: t_next,
                    kind: crate::simulator::EventKind::Bearing,
                    subject: Some(id),
                    partner: None,
                    offspring: newborn_buf.clone(),
                    immigrants: Vec::new(),
                })
            } else {
                let h = model.death_rate(s.kind, s.age, phi);
                check_bound("h", h, h_max, s, phi)?;
                if offset < b + h {
                    let x = pop.remove_at(idx);
                    let split = model.has_splitting(s.kind);
                    newborn_buf.clear();
                    if split {
                        newborn_buf.extend_from_slice(model.splitting(s.kind).sample(rng));
                        add_newborns(&mut pop, &newborn_buf);
                    }
                    Some(EventRecord {
                        time: t_next,
                        kind: if split {
                            EventKind::SplitDeath
                        } else {
                            EventKind::PlainDeath
                        },
                        subject: Some(x.id),
                        partner: None,
                        offspring: newborn_buf.clone(),
                        immigrants: Vec::new(),
                    })
                } else {
                    None
                }
            }
        } else {
            let im = immigration.expect("immigration slice only exists with immigration");
            let offset = u - individual_mass;
            let phi = phi_tracker.update(&pop);
            let g = im.arrival_rate(phi);
            check_bound("g", g, g_max, State::new(0, 0.0), phi)?;
            if offset < g {
                let size = batch.as_ref().expect("batch law compiled").sample(rng)[0];
                let mut arrivals = Vec::with_capacity(size as usize);
                for _ in 0..size {
                    let s = im.sample_state(rng);
                    pop.insert(s.kind, s.age);
                    arrivals.push(s);
                }
                Some(EventRecord {
                    time: t_next,
                    kind: EventKind::Immigration,
                    subject: None,
                    partner: None,
                    offspring: Vec::new(),
                    immigrants: arrivals,
                })
            } else {
                None
            }
        };
        if let Some(r) = record {
            event_count += 1;
            if pop.len() > opts.population_cap {
                return Err(Error::Resource(format!(
                    "population reached {} individuals (cap {}) at t = {:.6}",
                    pop.len(),
                    opts.population_cap,
                    t_next
                )));
            }
            if opts.record_events {
                events.push(r);
            }
        }
    }
    while next_grid < opts.grid.len() {
        for (j, f) in opts.observables.iter().enumerate() {
            series[j].push(pop.pair(f));
        }
        next_grid += 1;
    }
    if pop.max_age() > omega * (1.0 + 1e-12) {
        return Err(Error::Integrity(format!(
            "an individual aged past omega = {omega}"
        )));
    }
    Ok(Trajectory {
        k: opts.k,
        t_end: opts.t_end,
        master_seed: 0,
        replicate: 0,
        a_star,
        initial: s0.clone(),
        events,
        event_count,
        candidates,
        grid: opts.grid.clone(),
        observable_names: opts.observables.iter().map(|f| f.name.clone()).collect(),
        series,
        final_population: pop,
    })
}

fn add_newborns(pop: &mut Population, counts: &[u32]) {
    for (kind, &c) in counts.iter().enumerate() {
        for _ in 0..c {
            pop.insert(kind, 0.0);
        }
    }
}

/// Applies one recorded event to `pop`, whose clock must already equal the
/// event time. Returns the removed individual, if any.
pub fn apply_event(pop: &mut Population, e: &EventRecord) -> Result<Option<crate::model::Individual>> {
    match e.kind {
        EventKind::Bearing => {
            add_newborns(pop, &e.offspring);
            Ok(None)
        }
        EventKind::SplitDeath | EventKind::PlainDeath => {
            let id = e
                .subject
                .ok_or_else(|| Error::Integrity("death event without subject".into()))?;
            let x = pop.remove(id)?;
            add_newborns(pop, &e.offspring);
            Ok(Some(x))
        }
        EventKind::Immigration => {
            for s in &e.immigrants {
                pop.insert(s.kind, s.age);
            }
            Ok(None)
        }
        _ => Err(Error::contract(
            "couple events cannot be replayed on a single-age population",
        )),
    }
}

/// Rebuilds the population at each grid time by replaying the event log and
/// returns `(f, S_t)` for every observable. Used to verify replay determinism.
pub fn replay_series(traj: &Trajectory, observables: &[TestFunction]) -> Result<Vec<Vec<f64>>> {
    if traj.events.len() != traj.event_count {
        return Err(Error::contract("trajectory was recorded without its event log"));
    }
    let mut pop = traj.initial.clone();
    let mut out = vec![Vec::with_capacity(traj.grid.len()); observables.len()];
    let mut next = 0;
    for e in &traj.events {
        while next < traj.grid.len() && traj.grid[next] < e.time {
            pop.clock = traj.grid[next];
            for (j, f) in observables.iter().enumerate() {
                out[j].push(pop.pair(f));
            }
            next += 1;
        }
        pop.clock = e.time;
        apply_event(&mut pop, e)?;
    }
    while next < traj.grid.len() {
        pop.clock = traj.grid[next];
        for (j, f) in observables.iter().enumerate() {
            out[j].push(pop.pair(f));
        }
        next += 1;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Bounds, ModelSpec, OffspringLaw, RateFn};

    fn bd(b: f64, h: f64) -> RateModel {
        RateModel::new(ModelSpec {
            n_types: 1,
            birth: RateFn::constant(1, b),
            death: RateFn::constant(1, h),
            bearing: vec![OffspringLaw::Deterministic { counts: vec![1] }],
            splitting: vec![],
            functionals: vec![],
            immigration: None,
            bounds: Bounds {
                b_max: Some(b.max(0.1)),
                h_max: Some(h.max(0.1)),
                ..Bounds::default()
            },
            phi_max: None,
        })
        .unwrap()
    }

    fn cohort(n: usize, age: f64) -> Population {
        Population::from_states(1, &vec![State::new(0, age); n], 0.0).unwrap()
    }

    #[test]
    fn no_dynamics_means_no_events() {
        let m = bd(0.0, 0.0);
        let s0 = cohort(5, 1.0);
        let opts = SimOptions::new(2.0, 1).with_observables(vec![TestFunction::age()]);
        let t = simulate(&m, &s0, &opts, 1, 0).unwrap();
        assert_eq!(t.event_count, 0);
        assert!((t.final_value(0) - 15.0).abs() < 1e-12);
    }

    #[test]
    fn equal_seeds_give_identical_event_logs() {
        let m = bd(0.5, 0.3);
        let s0 = cohort(50, 0.0);
        let opts = SimOptions::new(2.0, 1);
        let a = simulate(&m, &s0, &opts, 42, 3).unwrap();
        let b = simulate(&m, &s0, &opts, 42, 3).unwrap();
        assert_eq!(a.events, b.events);
        let c = simulate(&m, &s0, &opts, 42, 4).unwrap();
        assert_ne!(a.events, c.events);
    }

    #[test]
    fn replay_reproduces_snapshots() {
        let m = bd(0.5, 0.3);
        let s0 = cohort(40, 0.5);
        let fs = vec![TestFunction::total(), TestFunction::age()];
        let opts = SimOptions::new(2.0, 1).with_observables(fs.clone());
        let t = simulate(&m, &s0, &opts, 9, 0).unwrap();
        let replayed = replay_series(&t, &fs).unwrap();
        assert_eq!(replayed, t.series);
    }

    #[test]
    fn bound_violation_is_reported() {
        let mut m = bd(0.5, 0.3);
        m.spec.bounds.b_max = Some(0.2);
        let s0 = cohort(10, 0.0);
        let err = simulate(&m, &s0, &SimOptions::new(5.0, 1), 1, 0).unwrap_err();
        assert!(matches!(err, Error::BoundViolation { quantity: "b", .. }));
    }

    #[test]
    fn population_cap_is_enforced() {
        let m = bd(3.0, 0.0);
        let s0 = cohort(10, 0.0);
        let mut opts = SimOptions::new(5.0, 1);
        opts.population_cap = 100;
        assert!(matches!(
            simulate(&m, &s0, &opts, 1, 0),
            Err(Error::Resource(_))
        ));
    }
}
