use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CoupleState, PairTestFunction};

/// An individual of either sex, identified by a permanent id.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Person {
    pub id: u64,
    pub birth_time: f64,
}

/// A married pair; both partners keep their own ids and birth times.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Couple {
    pub female: Person,
    pub male: Person,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Slot {
    Female(usize),
    Male(usize),
    Wife(usize),
    Husband(usize),
}

/// Population of single females, single males and couples.
#[derive(Clone, Debug, Default)]
pub struct CouplePopulation {
    pub clock: f64,
    females: Vec<Person>,
    males: Vec<Person>,
    couples: Vec<Couple>,
    index: HashMap<u64, Slot>,
    next_id: u64,
}

impl CouplePopulation {
    pub fn new() -> Self {
        CouplePopulation::default()
    }

    pub fn from_states(states: &[CoupleState], clock: f64) -> Result<Self> {
        let mut pop = CouplePopulation {
            clock,
            ..CouplePopulation::default()
        };
        for s in states {
            match *s {
                CoupleState::Female { v } => {
                    pop.insert_female(v)?;
                }
                CoupleState::Male { w } => {
                    pop.insert_male(w)?;
                }
                CoupleState::Couple { v, w } => {
                    let f = pop.insert_female(v)?;
                    let m = pop.insert_male(w)?;
                    pop.marry(f, m);
                }
            }
        }
        Ok(pop)
    }

    fn person(&mut self, age: f64) -> Result<Person> {
        if !(age >= 0.0) {
            return Err(Error::contract(format!("age must be nonnegative, got {age}")));
        }
        let p = Person {
            id: self.next_id,
            birth_time: self.clock - age,
        };
        self.next_id += 1;
        Ok(p)
    }

    /// Adds a single female of the given age; returns her index.
    pub fn insert_female(&mut self, age: f64) -> Result<usize> {
        let p = self.person(age)?;
        self.index.insert(p.id, Slot::Female(self.females.len()));
        self.females.push(p);
        Ok(self.females.len() - 1)
    }

    pub fn insert_male(&mut self, age: f64) -> Result<usize> {
        let p = self.person(age)?;
        self.index.insert(p.id, Slot::Male(self.males.len()));
        self.males.push(p);
        Ok(self.males.len() - 1)
    }

    fn push_female(&mut self, p: Person) {
        self.index.insert(p.id, Slot::Female(self.females.len()));
        self.females.push(p);
    }

    fn push_male(&mut self, p: Person) {
        self.index.insert(p.id, Slot::Male(self.males.len()));
        self.males.push(p);
    }

    pub fn remove_female(&mut self, idx: usize) -> Person {
        let p = self.females.swap_remove(idx);
        self.index.remove(&p.id);
        if let Some(moved) = self.females.get(idx) {
            self.index.insert(moved.id, Slot::Female(idx));
        }
        p
    }

    pub fn remove_male(&mut self, idx: usize) -> Person {
        let p = self.males.swap_remove(idx);
        self.index.remove(&p.id);
        if let Some(moved) = self.males.get(idx) {
            self.index.insert(moved.id, Slot::Male(idx));
        }
        p
    }

    fn remove_couple(&mut self, idx: usize) -> Couple {
        let c = self.couples.swap_remove(idx);
        self.index.remove(&c.female.id);
        self.index.remove(&c.male.id);
        if let Some(moved) = self.couples.get(idx) {
            self.index.insert(moved.female.id, Slot::Wife(idx));
            self.index.insert(moved.male.id, Slot::Husband(idx));
        }
        c
    }

    /// Marries single female `f` to single male `m`.
    pub fn marry(&mut self, f: usize, m: usize) -> usize {
        let female = self.remove_female(f);
        let male = self.remove_male(m);
        let idx = self.couples.len();
        self.index.insert(female.id, Slot::Wife(idx));
        self.index.insert(male.id, Slot::Husband(idx));
        self.couples.push(Couple { female, male });
        idx
    }

    /// Splits couple `idx` into two singles.
    pub fn separate(&mut self, idx: usize) -> Couple {
        let c = self.remove_couple(idx);
        self.push_female(c.female);
        self.push_male(c.male);
        c
    }

    /// Removes the wife of couple `idx`; the husband becomes single.
    pub fn widow_husband(&mut self, idx: usize) -> Couple {
        let c = self.remove_couple(idx);
        self.push_male(c.male);
        c
    }

    /// Removes the husband of couple `idx`; the wife becomes single.
    pub fn widow_wife(&mut self, idx: usize) -> Couple {
        let c = self.remove_couple(idx);
        self.push_female(c.female);
        c
    }

    pub fn females(&self) -> &[Person] {
        &self.females
    }

    pub fn males(&self) -> &[Person] {
        &self.males
    }

    pub fn couples(&self) -> &[Couple] {
        &self.couples
    }

    /// `[N_F, N_M, N_FM]`
    pub fn counts(&self) -> [usize; 3] {
        [self.females.len(), self.males.len(), self.couples.len()]
    }

    /// Number of units (couples count once).
    pub fn len(&self) -> usize {
        self.females.len() + self.males.len() + self.couples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Head count `X = N_F + N_M + 2 N_FM`.
    pub fn head_count(&self) -> usize {
        self.females.len() + self.males.len() + 2 * self.couples.len()
    }

    #[inline]
    pub fn age(&self, p: &Person) -> f64 {
        self.clock - p.birth_time
    }

    pub fn female_state(&self, idx: usize) -> CoupleState {
        CoupleState::Female {
            v: self.age(&self.females[idx]),
        }
    }

    pub fn male_state(&self, idx: usize) -> CoupleState {
        CoupleState::Male {
            w: self.age(&self.males[idx]),
        }
    }

    pub fn couple_state(&self, idx: usize) -> CoupleState {
        let c = &self.couples[idx];
        CoupleState::Couple {
            v: self.age(&c.female),
            w: self.age(&c.male),
        }
    }

    pub fn states(&self) -> impl Iterator<Item = CoupleState> + Clone + '_ {
        (0..self.females.len())
            .map(|i| self.female_state(i))
            .chain((0..self.males.len()).map(|i| self.male_state(i)))
            .chain((0..self.couples.len()).map(|i| self.couple_state(i)))
    }

    /// `(f, S)`
    pub fn pair(&self, f: &PairTestFunction) -> f64 {
        self.states().map(|s| f.eval(&s)).sum()
    }

    pub fn max_age(&self) -> f64 {
        let oldest = self
            .females
            .iter()
            .chain(&self.males)
            .chain(self.couples.iter().flat_map(|c| [&c.female, &c.male]))
            .map(|p| p.birth_time)
            .fold(f64::INFINITY, f64::min);
        if oldest.is_finite() {
            self.clock - oldest
        } else {
            0.0
        }
    }

    /// Where person `id` currently lives: `(shape, index)` with shape
    /// `0 = single female, 1 = single male, 2 = couple`.
    pub fn locate(&self, id: u64) -> Option<(usize, usize)> {
        self.index.get(&id).map(|s| match *s {
            Slot::Female(i) => (0, i),
            Slot::Male(i) => (1, i),
            Slot::Wife(i) | Slot::Husband(i) => (2, i),
        })
    }
}

/// Uniform band of couples on `[v_lo, v_hi] x [w_lo, w_hi]`, per unit of K.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoupleBand {
    pub v_lo: f64,
    pub v_hi: f64,
    pub w_lo: f64,
    pub w_hi: f64,
    pub mass: f64,
}

/// Uniform band of singles on `[age_lo, age_hi]`, per unit of K.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SingleBand {
    pub age_lo: f64,
    pub age_hi: f64,
    pub mass: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonogamyInitial {
    #[serde(default)]
    pub females: Vec<SingleBand>,
    #[serde(default)]
    pub males: Vec<SingleBand>,
    #[serde(default)]
    pub couples: Vec<CoupleBand>,
}

impl MonogamyInitial {
    pub fn validate(&self) -> Result<()> {
        let single_ok = |b: &SingleBand| b.age_lo >= 0.0 && b.age_hi > b.age_lo && b.mass >= 0.0;
        let couple_ok =
            |b: &CoupleBand| b.v_lo >= 0.0 && b.v_hi > b.v_lo && b.w_lo >= 0.0 && b.w_hi > b.w_lo && b.mass >= 0.0;
        if self.females.iter().chain(&self.males).all(single_ok) && self.couples.iter().all(couple_ok) {
            Ok(())
        } else {
            Err(Error::contract("monogamy bands need nonnegative mass and nonempty age ranges"))
        }
    }

    pub fn a_star(&self) -> f64 {
        self.females
            .iter()
            .chain(&self.males)
            .map(|b| b.age_hi)
            .chain(self.couples.iter().map(|b| b.v_hi.max(b.w_hi)))
            .fold(0.0, f64::max)
    }

    /// `floor(K mass)` units per band at quantile-midpoint ages. Couple ages
    /// follow the same quantile in both coordinates, so the band diagonal is
    /// sampled evenly.
    pub fn population(&self, k: u64) -> Result<CouplePopulation> {
        self.validate()?;
        let mut states = Vec::new();
        let at = |lo: f64, hi: f64, j: usize, n: usize| lo + (j as f64 + 0.5) / n as f64 * (hi - lo);
        for (bands, female) in [(&self.females, true), (&self.males, false)] {
            for b in bands {
                let n = (k as f64 * b.mass).floor() as usize;
                for j in 0..n {
                    let a = at(b.age_lo, b.age_hi, j, n);
                    states.push(if female {
                        CoupleState::Female { v: a }
                    } else {
                        CoupleState::Male { w: a }
                    });
                }
            }
        }
        for b in &self.couples {
            let n = (k as f64 * b.mass).floor() as usize;
            // A low-discrepancy pairing of the two quantile grids.
            let side = (n as f64).sqrt().ceil() as usize;
            for j in 0..n {
                let (r, c) = (j / side.max(1), j % side.max(1));
                let rows = n.div_ceil(side.max(1));
                states.push(CoupleState::Couple {
                    v: at(b.v_lo, b.v_hi, r, rows),
                    w: at(b.w_lo, b.w_hi, c, side),
                });
            }
        }
        CouplePopulation::from_states(&states, 0.0)
    }
}
