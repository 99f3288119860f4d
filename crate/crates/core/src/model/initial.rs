use serde::{Deserialize, Serialize};

use super::population::Population;
use super::state::State;
use crate::error::{Error, Result};
use crate::limit::{CohortMeasure, DensityField};

/// Uniform mass on `[age_lo, age_hi]` for one type, per unit of K. A band
/// with `age_lo == age_hi` is an atom.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialBand {
    pub kind: usize,
    pub age_lo: f64,
    pub age_hi: f64,
    pub mass: f64,
}

/// Initial condition shared by the simulator (at each K) and the limit solvers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct InitialCondition {
    pub bands: Vec<InitialBand>,
}

impl InitialCondition {
    pub fn new(bands: Vec<InitialBand>) -> Self {
        InitialCondition { bands }
    }

    pub fn validate(&self, n_types: usize) -> Result<()> {
        for b in &self.bands {
            if b.kind >= n_types || !(b.age_lo >= 0.0) || !(b.age_hi >= b.age_lo) || !(b.mass >= 0.0) {
                return Err(Error::contract(format!("invalid initial band {b:?}")));
            }
        }
        Ok(())
    }

    pub fn a_star(&self) -> f64 {
        self.bands.iter().map(|b| b.age_hi).fold(0.0, f64::max)
    }

    pub fn total_mass(&self) -> f64 {
        self.bands.iter().map(|b| b.mass).sum()
    }

    /// `floor(K mass)` individuals per band, at evenly spaced quantile ages.
    pub fn population(&self, n_types: usize, k: u64) -> Result<Population> {
        self.validate(n_types)?;
        let mut states = Vec::new();
        for b in &self.bands {
            let n = (k as f64 * b.mass).floor() as usize;
            for j in 0..n {
                let u = (j as f64 + 0.5) / n as f64;
                states.push(State::new(b.kind, b.age_lo + u * (b.age_hi - b.age_lo)));
            }
        }
        Population::from_states(n_types, &states, 0.0)
    }

    /// Cohort approximation with `atoms` cohorts per non-degenerate band.
    pub fn cohorts(&self, n_types: usize, atoms: usize) -> Result<CohortMeasure> {
        self.validate(n_types)?;
        let mut out = Vec::new();
        for b in &self.bands {
            if b.age_hi == b.age_lo {
                out.push((State::new(b.kind, b.age_lo), b.mass));
                continue;
            }
            let atoms = atoms.max(1);
            for j in 0..atoms {
                let u = (j as f64 + 0.5) / atoms as f64;
                out.push((State::new(b.kind, b.age_lo + u * (b.age_hi - b.age_lo)), b.mass / atoms as f64));
            }
        }
        CohortMeasure::from_atoms(n_types, &out)
    }

    /// Cell-average densities on `cells` cells of width `da`. Atoms are
    /// rejected: the density form needs an absolutely continuous start.
    pub fn density(&self, n_types: usize, da: f64, cells: usize) -> Result<DensityField> {
        self.validate(n_types)?;
        let mut d = vec![vec![0.0; cells]; n_types];
        for b in &self.bands {
            if b.age_hi == b.age_lo {
                return Err(Error::contract("initial condition has atoms; the density solver is disabled"));
            }
            let rho = b.mass / (b.age_hi - b.age_lo);
            for (j, cell) in d[b.kind].iter_mut().enumerate() {
                let (lo, hi) = (j as f64 * da, (j + 1) as f64 * da);
                let overlap = (hi.min(b.age_hi) - lo.max(b.age_lo)).max(0.0);
                *cell += rho * overlap / da;
            }
        }
        Ok(DensityField {
            clock: 0.0,
            da,
            densities: d,
        })
    }
}
