use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::state::State;
use super::test_fn::TestFunction;
use crate::error::{Error, Result};

/// A living individual. Age is derived from the clock: `age = clock - birth_time`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Individual {
    pub id: u64,
    pub kind: usize,
    pub birth_time: f64,
}

/// Finite counting measure over `(type, age)` states.
///
/// Removal swaps the last member into the vacated slot, so member order is a
/// deterministic function of the event history.
#[derive(Clone, Debug, Default)]
pub struct Population {
    pub clock: f64,
    members: Vec<Individual>,
    index: HashMap<u64, usize>,
    next_id: u64,
    counts: Vec<usize>,
}

impl Population {
    pub fn new(n_types: usize) -> Self {
        Population {
            clock: 0.0,
            members: Vec::new(),
            index: HashMap::new(),
            next_id: 0,
            counts: vec![0; n_types],
        }
    }

    pub fn from_states(n_types: usize, states: &[State], clock: f64) -> Result<Self> {
        let mut pop = Population::new(n_types);
        pop.clock = clock;
        for s in states {
            if s.kind >= n_types || !(s.age >= 0.0) {
                return Err(Error::contract(format!("invalid initial state {s:?}")));
            }
            pop.insert(s.kind, s.age);
        }
        Ok(pop)
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn next_id(&self) -> u64 {
        self.next_id
    }

    pub fn members(&self) -> &[Individual] {
        &self.members
    }

    pub fn type_counts(&self) -> &[usize] {
        &self.counts
    }

    #[inline]
    pub fn age_of(&self, x: &Individual) -> f64 {
        self.clock - x.birth_time
    }

    #[inline]
    pub fn state(&self, idx: usize) -> State {
        let x = &self.members[idx];
        State::new(x.kind, self.clock - x.birth_time)
    }

    pub fn states(&self) -> Vec<State> {
        (0..self.len()).map(|i| self.state(i)).collect()
    }

    pub fn position(&self, id: u64) -> Option<usize> {
        self.index.get(&id).copied()
    }

    /// Adds an individual of the given current age and returns its id.
    pub fn insert(&mut self, kind: usize, age: f64) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        self.index.insert(id, self.members.len());
        self.members.push(Individual {
            id,
            kind,
            birth_time: self.clock - age,
        });
        self.counts[kind] += 1;
        id
    }

    pub fn remove_at(&mut self, idx: usize) -> Individual {
        let x = self.members.swap_remove(idx);
        self.index.remove(&x.id);
        if idx < self.members.len() {
            let moved = self.members[idx].id;
            self.index.insert(moved, idx);
        }
        self.counts[x.kind] -= 1;
        x
    }

    pub fn remove(&mut self, id: u64) -> Result<Individual> {
        let idx = self
            .position(id)
            .ok_or_else(|| Error::Integrity(format!("individual {id} is not alive")))?;
        Ok(self.remove_at(idx))
    }

    /// `(f, S)`, summed exactly over individuals.
    pub fn pair(&self, f: &TestFunction) -> f64 {
        self.members
            .iter()
            .map(|x| f.eval(x.kind, self.clock - x.birth_time))
            .sum()
    }

    pub fn max_age(&self) -> f64 {
        self.members
            .iter()
            .map(|x| self.clock - x.birth_time)
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TypeSel;

    #[test]
    fn pairing_examples() {
        let empty = Population::new(2);
        assert_eq!(empty.pair(&TestFunction::age()), 0.0);
        let pop = Population::from_states(2, &[State::new(0, 2.0), State::new(1, 3.0)], 0.0).unwrap();
        assert_eq!(pop.pair(&TestFunction::age()), 5.0);
        assert_eq!(pop.pair(&TestFunction::indicator(0)), 1.0);
    }

    #[test]
    fn ages_advance_with_clock() {
        let mut pop = Population::from_states(1, &[State::new(0, 1.0)], 0.0).unwrap();
        pop.clock = 2.5;
        assert!((pop.state(0).age - 3.5).abs() < 1e-15);
        let id = pop.insert(0, 0.0);
        assert_eq!(pop.state(pop.position(id).unwrap()).age, 0.0);
    }

    #[test]
    fn swap_remove_keeps_index_consistent() {
        let states: Vec<State> = (0..5).map(|k| State::new(k % 2, k as f64)).collect();
        let mut pop = Population::from_states(2, &states, 0.0).unwrap();
        pop.remove(1).unwrap();
        pop.remove(4).unwrap();
        for (idx, x) in pop.members().iter().enumerate() {
            assert_eq!(pop.position(x.id), Some(idx));
        }
        assert_eq!(pop.type_counts(), &[2, 1]);
        assert!(pop.remove(1).is_err());
        let f = TestFunction::single("t1", TypeSel::Only(1), crate::model::AgeFn::one());
        assert_eq!(pop.pair(&f), 1.0);
    }
}
