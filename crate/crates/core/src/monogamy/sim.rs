use rand::Rng;
use rand_distr::Exp1;

use super::model::MonogamyModel;
use super::population::CouplePopulation;
use crate::error::{Error, Result};
use crate::model::{CoupleState, OutcomeTable, PairTestFunction};
use crate::rng::{self, StreamRng};
use crate::simulator::{uniform_grid, EventKind, EventRecord, DEFAULT_POPULATION_CAP};

#[derive(Clone, Debug)]
pub struct MonogamyOptions {
    pub t_end: f64,
    pub k: u64,
    pub grid: Vec<f64>,
    pub observables: Vec<PairTestFunction>,
    pub record_events: bool,
    pub population_cap: usize,
}

impl MonogamyOptions {
    pub fn new(t_end: f64, k: u64) -> Self {
        MonogamyOptions {
            t_end,
            k,
            grid: uniform_grid(t_end, 20),
            observables: vec![PairTestFunction::head_count()],
            record_events: true,
            population_cap: DEFAULT_POPULATION_CAP,
        }
    }

    pub fn with_grid(mut self, grid: Vec<f64>) -> Self {
        self.grid = grid;
        self
    }

    pub fn with_observables(mut self, observables: Vec<PairTestFunction>) -> Self {
        self.observables = observables;
        self
    }

    pub fn without_events(mut self) -> Self {
        self.record_events = false;
        self
    }
}

#[derive(Clone, Debug)]
pub struct MonogamyTrajectory {
    pub k: u64,
    pub t_end: f64,
    pub master_seed: u64,
    pub replicate: u64,
    pub a_star: f64,
    pub initial: CouplePopulation,
    pub events: Vec<EventRecord>,
    pub event_count: usize,
    pub candidates: u64,
    pub grid: Vec<f64>,
    pub observable_names: Vec<String>,
    /// `series[j][g]` is `(f_j, S_t)` at `grid[g]`.
    pub series: Vec<Vec<f64>>,
    /// Head count `X` at each grid time.
    pub head_count: Vec<usize>,
    /// `[M^f]_T`, the sum of squared jumps of `(f_j, S)` over `[0, T]`.
    pub brackets: Vec<f64>,
    pub final_population: CouplePopulation,
}

impl MonogamyTrajectory {
    pub fn final_value(&self, j: usize) -> f64 {
        *self.series[j].last().expect("grid is non-empty")
    }
}

/// Expected change of `X` for one event.
pub fn expected_delta(e: &EventRecord) -> i64 {
    match e.kind {
        EventKind::Marriage | EventKind::Separation => 0,
        EventKind::Widowing | EventKind::PlainDeath | EventKind::SplitDeath => -1,
        EventKind::Bearing => e.offspring.iter().map(|&c| c as i64).sum(),
        EventKind::Immigration => e.immigrants.len() as i64,
    }
}

fn audit(before: usize, after: usize, e: &EventRecord) -> Result<()> {
    let delta = after as i64 - before as i64;
    let expected = expected_delta(e);
    if delta != expected {
        return Err(Error::Integrity(format!(
            "{:?} at t = {} changed X by {delta}, expected {expected}",
            e.kind, e.time
        )));
    }
    Ok(())
}

struct Phi<'a> {
    model: &'a MonogamyModel,
    k: f64,
    phi: Vec<f64>,
}

impl Phi<'_> {
    fn update(&mut self, pop: &CouplePopulation) -> &[f64] {
        match self.model.shape_weights() {
            Some(weights) => {
                let c = pop.counts();
                for (p, w) in self.phi.iter_mut().zip(weights) {
                    *p = (w[0] * c[0] as f64 + w[1] * c[1] as f64 + w[2] * c[2] as f64) / self.k;
                }
            }
            None => {
                for (p, g) in self.phi.iter_mut().zip(&self.model.spec.functionals) {
                    *p = pop.pair(g) / self.k;
                }
            }
        }
        &self.phi
    }
}

fn check(quantity: &'static str, value: f64, bound: f64, s: CoupleState, phi: &[f64]) -> Result<()> {
    if value > bound * (1.0 + 1e-12) || value.is_nan() {
        return Err(Error::BoundViolation {
            quantity,
            value,
            bound,
            diagnostic: format!("state {s:?}, phi {phi:?}"),
        });
    }
    Ok(())
}

fn add_newborns(pop: &mut CouplePopulation, counts: &[u32]) -> Result<()> {
    for _ in 0..counts[0] {
        pop.insert_female(0.0)?;
    }
    for _ in 0..counts[1] {
        pop.insert_male(0.0)?;
    }
    Ok(())
}

fn newborn_jump(fs: &[PairTestFunction], counts: &[u32], out: &mut [f64]) {
    for (d, f) in out.iter_mut().zip(fs) {
        *d = counts[0] as f64 * f.female_value(0.0) + counts[1] as f64 * f.male_value(0.0);
    }
}

pub fn simulate_monogamy(
    model: &MonogamyModel,
    s0: &CouplePopulation,
    opts: &MonogamyOptions,
    master_seed: u64,
    replicate: u64,
) -> Result<MonogamyTrajectory> {
    let mut rng = rng::stream(master_seed, opts.k, replicate);
    let mut traj = simulate_monogamy_with_rng(model, s0, opts, &mut rng)?;
    traj.master_seed = master_seed;
    traj.replicate = replicate;
    Ok(traj)
}

pub fn simulate_monogamy_with_rng(
    model: &MonogamyModel,
    s0: &CouplePopulation,
    opts: &MonogamyOptions,
    rng: &mut StreamRng,
) -> Result<MonogamyTrajectory> {
    if !(opts.t_end > 0.0) {
        return Err(Error::contract("horizon T must be positive"));
    }
    if opts.k == 0 {
        return Err(Error::contract("K must be a positive integer"));
    }
    if opts.grid.is_empty()
        || opts.grid.iter().any(|&t| t < 0.0 || t > opts.t_end)
        || opts.grid.windows(2).any(|w| w[1] < w[0])
    {
        return Err(Error::contract("sample grid must be sorted, non-empty, within [0, T]"));
    }
    if s0.clock != 0.0 {
        return Err(Error::contract("initial population must have clock 0"));
    }
    if s0.is_empty() {
        return Err(Error::contract("empty initial population"));
    }
    let a_star = s0.max_age();
    let omega = opts.t_end + a_star;
    let (b_max, h_max, rho_max) = model.bounds(omega)?;
    let k = opts.k as f64;
    let fs = &opts.observables;
    let single: &OutcomeTable = model.single_litter();
    let couple: &OutcomeTable = model.couple_litter();

    let slice_f = b_max + h_max;
    let slice_m = h_max;
    let slice_c = b_max + 3.0 * h_max;

    let mut pop = s0.clone();
    let mut phi = Phi {
        model,
        k,
        phi: vec![0.0; model.n_functionals()],
    };
    let mut events = Vec::new();
    let mut event_count = 0usize;
    let mut candidates = 0u64;
    let mut series = vec![Vec::with_capacity(opts.grid.len()); fs.len()];
    let mut head_count = Vec::with_capacity(opts.grid.len());
    let mut brackets = vec![0.0; fs.len()];
    let mut jump = vec![0.0; fs.len()];
    let mut next_grid = 0usize;

    loop {
        let [nf, nm, nc] = pop.counts();
        let pairs = nf.checked_mul(nm).ok_or_else(|| {
            Error::Resource(format!("N_F * N_M overflows ({nf} females, {nm} males)"))
        })?;
        let mass_f = slice_f * nf as f64;
        let mass_m = slice_m * nm as f64;
        let mass_c = slice_c * nc as f64;
        let mass_r = rho_max * pairs as f64 / k;
        let total = mass_f + mass_m + mass_c + mass_r;
        let t_next = if total > 0.0 {
            let e: f64 = rng.sample(Exp1);
            pop.clock + e / total
        } else {
            f64::INFINITY
        };
        let now = pop.clock;
        while next_grid < opts.grid.len() && opts.grid[next_grid] < t_next {
            pop.clock = opts.grid[next_grid];
            for (j, f) in fs.iter().enumerate() {
                series[j].push(pop.pair(f));
            }
            head_count.push(pop.head_count());
            next_grid += 1;
        }
        pop.clock = now;
        if t_next > opts.t_end {
            pop.clock = opts.t_end;
            break;
        }
        pop.clock = t_next;
        candidates += 1;
        let mut u = rng.random::<f64>() * total;
        let before = pop.head_count();
        let record = if u < mass_f {
            let idx = ((u / slice_f) as usize).min(nf - 1);
            let offset = u - idx as f64 * slice_f;
            let s = pop.female_state(idx);
            let v = pop.age(&pop.females()[idx]);
            let p = phi.update(&pop);
            let b = model.single_birth(v, p);
            check("b", b, b_max, s, p)?;
            if offset < b {
                let counts = single.sample(rng).to_vec();
                newborn_jump(fs, &counts, &mut jump);
                let id = pop.females()[idx].id;
                add_newborns(&mut pop, &counts)?;
                Some(event(t_next, EventKind::Bearing, Some(id), None, counts))
            } else {
                let h = model.female_death(v, p);
                check("h", h, h_max, s, p)?;
                if offset < b + h {
                    for (d, f) in jump.iter_mut().zip(fs) {
                        *d = -f.female_value(v);
                    }
                    let x = pop.remove_female(idx);
                    Some(event(t_next, EventKind::PlainDeath, Some(x.id), None, vec![]))
                } else {
                    None
                }
            }
        } else if {
            u -= mass_f;
            u < mass_m
        } {
            let idx = ((u / slice_m) as usize).min(nm - 1);
            let offset = u - idx as f64 * slice_m;
            let s = pop.male_state(idx);
            let w = pop.age(&pop.males()[idx]);
            let p = phi.update(&pop);
            let h = model.male_death(w, p);
            check("h", h, h_max, s, p)?;
            if offset < h {
                for (d, f) in jump.iter_mut().zip(fs) {
                    *d = -f.male_value(w);
                }
                let x = pop.remove_male(idx);
                Some(event(t_next, EventKind::PlainDeath, Some(x.id), None, vec![]))
            } else {
                None
            }
        } else if {
            u -= mass_m;
            u < mass_c
        } {
            let idx = ((u / slice_c) as usize).min(nc - 1);
            let mut offset = u - idx as f64 * slice_c;
            let s = pop.couple_state(idx);
            let (v, w) = match s {
                CoupleState::Couple { v, w } => (v, w),
                _ => unreachable!("couple slot holds a couple"),
            };
            let c = pop.couples()[idx];
            let p = phi.update(&pop);
            let b = model.couple_birth(v, w, p);
            check("b", b, b_max, s, p)?;
            if offset < b {
                let counts = couple.sample(rng).to_vec();
                newborn_jump(fs, &counts, &mut jump);
                add_newborns(&mut pop, &counts)?;
                Some(event(t_next, EventKind::Bearing, Some(c.female.id), Some(c.male.id), counts))
            } else {
                offset -= b_max;
                let hf = model.female_death_married(v, w, p);
                check("h", hf, h_max, s, p)?;
                let hm = model.male_death_married(v, w, p);
                check("h", hm, h_max, s, p)?;
                let sep = model.separation(v, w, p);
                check("h", sep, h_max, s, p)?;
                if (0.0..hf).contains(&offset) {
                    for (d, f) in jump.iter_mut().zip(fs) {
                        *d = f.male_value(w) - f.couple_value(v, w);
                    }
                    pop.widow_husband(idx);
                    Some(event(t_next, EventKind::Widowing, Some(c.female.id), Some(c.male.id), vec![]))
                } else if (h_max..h_max + hm).contains(&offset) {
                    for (d, f) in jump.iter_mut().zip(fs) {
                        *d = f.female_value(v) - f.couple_value(v, w);
                    }
                    pop.widow_wife(idx);
                    Some(event(t_next, EventKind::Widowing, Some(c.male.id), Some(c.female.id), vec![]))
                } else if (2.0 * h_max..2.0 * h_max + sep).contains(&offset) {
                    for (d, f) in jump.iter_mut().zip(fs) {
                        *d = f.female_value(v) + f.male_value(w) - f.couple_value(v, w);
                    }
                    pop.separate(idx);
                    Some(event(t_next, EventKind::Separation, Some(c.female.id), Some(c.male.id), vec![]))
                } else {
                    None
                }
            }
        } else {
            // Uniform female-male pair, accepted with probability rho / rho_max.
            let fi = rng.random_range(0..nf);
            let mi = rng.random_range(0..nm);
            let v = pop.age(&pop.females()[fi]);
            let w = pop.age(&pop.males()[mi]);
            let s = CoupleState::Couple { v, w };
            let p = phi.update(&pop);
            let rho = model.marriage(v, w, p);
            check("rho", rho, rho_max, s, p)?;
            if rng.random::<f64>() * rho_max < rho {
                for (d, f) in jump.iter_mut().zip(fs) {
                    *d = f.couple_value(v, w) - f.female_value(v) - f.male_value(w);
                }
                let fid = pop.females()[fi].id;
                let mid = pop.males()[mi].id;
                pop.marry(fi, mi);
                Some(event(t_next, EventKind::Marriage, Some(fid), Some(mid), vec![]))
            } else {
                None
            }
        };
        if let Some(r) = record {
            audit(before, pop.head_count(), &r)?;
            for (q, d) in brackets.iter_mut().zip(&jump) {
                *q += d * d;
            }
            event_count += 1;
            if pop.head_count() > opts.population_cap {
                return Err(Error::Resource(format!(
                    "population reached {} individuals (cap {}) at t = {t_next:.6}",
                    pop.head_count(),
                    opts.population_cap
                )));
            }
            if opts.record_events {
                events.push(r);
            }
        }
    }
    while next_grid < opts.grid.len() {
        pop.clock = opts.grid[next_grid];
        for (j, f) in fs.iter().enumerate() {
            series[j].push(pop.pair(f));
        }
        head_count.push(pop.head_count());
        next_grid += 1;
    }
    pop.clock = opts.t_end;
    Ok(MonogamyTrajectory {
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
        observable_names: fs.iter().map(|f| f.name.clone()).collect(),
        series,
        head_count,
        brackets,
        final_population: pop,
    })
}

fn event(time: f64, kind: EventKind, subject: Option<u64>, partner: Option<u64>, offspring: Vec<u32>) -> EventRecord {
    EventRecord {
        time,
        kind,
        subject,
        partner,
        offspring,
        immigrants: Vec::new(),
    }
}

/// `X_t` on the trajectory grid plus the audited change of every event.
#[derive(Clone, Debug, PartialEq)]
pub struct Accounting {
    pub grid: Vec<f64>,
    pub head_count: Vec<usize>,
    /// `(time, kind, delta X)` per event.
    pub deltas: Vec<(f64, EventKind, i64)>,
}

/// Replays the event log from the initial population and audits `X` on
/// every event.
pub fn accounting_series(traj: &MonogamyTrajectory) -> Result<Accounting> {
    if traj.events.len() != traj.event_count {
        return Err(Error::contract("trajectory was recorded without its event log"));
    }
    let mut pop = traj.initial.clone();
    let mut head_count = Vec::with_capacity(traj.grid.len());
    let mut deltas = Vec::with_capacity(traj.events.len());
    let mut next = 0;
    for e in &traj.events {
        while next < traj.grid.len() && traj.grid[next] < e.time {
            head_count.push(pop.head_count());
            next += 1;
        }
        pop.clock = e.time;
        let before = pop.head_count();
        apply_monogamy_event(&mut pop, e)?;
        audit(before, pop.head_count(), e)?;
        deltas.push((e.time, e.kind, pop.head_count() as i64 - before as i64));
    }
    while next < traj.grid.len() {
        head_count.push(pop.head_count());
        next += 1;
    }
    if head_count != traj.head_count {
        return Err(Error::Integrity("replayed X series differs from the recorded one".into()));
    }
    Ok(Accounting {
        grid: traj.grid.clone(),
        head_count,
        deltas,
    })
}

fn subject(e: &EventRecord) -> Result<u64> {
    e.subject
        .ok_or_else(|| Error::Integrity(format!("{:?} event without subject", e.kind)))
}

/// Applies a recorded event to `pop`, whose clock must equal the event time.
pub fn apply_monogamy_event(pop: &mut CouplePopulation, e: &EventRecord) -> Result<()> {
    let missing = |id: u64| Error::Integrity(format!("person {id} not found for {:?}", e.kind));
    match e.kind {
        EventKind::Bearing => add_newborns(pop, &e.offspring),
        EventKind::PlainDeath => {
            let id = subject(e)?;
            match pop.locate(id).ok_or_else(|| missing(id))? {
                (0, i) => {
                    pop.remove_female(i);
                }
                (1, i) => {
                    pop.remove_male(i);
                }
                _ => return Err(Error::Integrity(format!("plain death of married person {id}"))),
            }
            Ok(())
        }
        EventKind::Widowing => {
            let id = subject(e)?;
            let (shape, i) = pop.locate(id).ok_or_else(|| missing(id))?;
            if shape != 2 {
                return Err(Error::Integrity(format!("widowing of unmarried person {id}")));
            }
            if pop.couples()[i].female.id == id {
                pop.widow_husband(i);
            } else {
                pop.widow_wife(i);
            }
            Ok(())
        }
        EventKind::Separation => {
            let id = subject(e)?;
            match pop.locate(id).ok_or_else(|| missing(id))? {
                (2, i) => {
                    pop.separate(i);
                    Ok(())
                }
                _ => Err(Error::Integrity(format!("separation of unmarried person {id}"))),
            }
        }
        EventKind::Marriage => {
            let fid = subject(e)?;
            let mid = e.partner.ok_or_else(|| Error::Integrity("marriage without partner".into()))?;
            match (pop.locate(fid), pop.locate(mid)) {
                (Some((0, f)), Some((1, m))) => {
                    pop.marry(f, m);
                    Ok(())
                }
                _ => Err(Error::Integrity(format!("marriage of {fid} and {mid} who are not both single"))),
            }
        }
        EventKind::SplitDeath | EventKind::Immigration => Err(Error::contract(format!(
            "{:?} does not occur in the monogamy model",
            e.kind
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::monogamy::model::MonogamySpec;

    fn pair_pop() -> CouplePopulation {
        CouplePopulation::from_states(&[CoupleState::Female { v: 0.0 }, CoupleState::Male { w: 0.0 }], 0.0)
            .unwrap()
    }

    #[test]
    fn single_pair_marriage_time_is_exponential() {
        // Only marriage, rho = 2 per unit K; one pair at K = 4 marries at rate 0.5.
        let model = MonogamyModel::new(MonogamySpec::constant(0.0, 0.0, 0.0, 0.0, 2.0)).unwrap();
        let opts = MonogamyOptions::new(200.0, 4).with_grid(vec![200.0]);
        let n = 2000;
        let times: Vec<f64> = (0..n)
            .map(|r| {
                let t = simulate_monogamy(&model, &pair_pop(), &opts, 5, r).unwrap();
                assert_eq!(t.events.len(), 1);
                t.events[0].time
            })
            .collect();
        let mean = crate::stats::mean(&times);
        let se = crate::stats::std_error(&times);
        assert!((mean - 2.0).abs() < 3.0 * se, "mean {mean} se {se}");
    }

    #[test]
    fn every_event_audited_and_replayed() {
        let mut spec = MonogamySpec::constant(1.2, 0.3, 0.4, 0.3, 3.0);
        spec.couple_litter = crate::model::OffspringLaw::Poisson {
            means: vec![0.7, 0.6],
            cap: 6,
        };
        let model = MonogamyModel::new(spec).unwrap();
        let s0 = CouplePopulation::from_states(
            &(0..60)
                .map(|i| match i % 3 {
                    0 => CoupleState::Female { v: i as f64 * 0.01 },
                    1 => CoupleState::Male { w: i as f64 * 0.02 },
                    _ => CoupleState::Couple { v: 0.5, w: 0.7 },
                })
                .collect::<Vec<_>>(),
            0.0,
        )
        .unwrap();
        let opts = MonogamyOptions::new(3.0, 50);
        let traj = simulate_monogamy(&model, &s0, &opts, 11, 0).unwrap();
        assert!(traj.event_count > 100);
        let acc = accounting_series(&traj).unwrap();
        assert_eq!(acc.deltas.len(), traj.event_count);
        for (i, e) in traj.events.iter().enumerate() {
            assert_eq!(acc.deltas[i].2, expected_delta(e));
        }
        let kinds: std::collections::HashSet<_> = traj.events.iter().map(|e| e.kind).collect();
        for k in [
            EventKind::Marriage,
            EventKind::Separation,
            EventKind::Widowing,
            EventKind::Bearing,
            EventKind::PlainDeath,
        ] {
            assert!(kinds.contains(&k), "{k:?} never happened");
        }
    }

    #[test]
    fn bearing_of_three_changes_x_by_three() {
        let e = event(0.0, EventKind::Bearing, Some(0), None, vec![2, 1]);
        assert_eq!(expected_delta(&e), 3);
        assert!(audit(5, 8, &e).is_ok());
        assert!(matches!(audit(5, 7, &e), Err(Error::Integrity(_))));
    }

    #[test]
    fn tampered_log_is_rejected() {
        let model = MonogamyModel::new(MonogamySpec::constant(0.0, 0.0, 0.0, 0.0, 2.0)).unwrap();
        let mut traj =
            simulate_monogamy(&model, &pair_pop(), &MonogamyOptions::new(50.0, 1), 3, 0).unwrap();
        assert_eq!(traj.events[0].kind, EventKind::Marriage);
        traj.events[0].kind = EventKind::Separation;
        assert!(matches!(accounting_series(&traj), Err(Error::Integrity(_))));
    }
}
