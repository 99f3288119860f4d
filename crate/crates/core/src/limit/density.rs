use nalgebra::{DMatrix, DVector};

use super::cohort::{CohortMeasure, LimitOptions};
use crate::error::{Error, Result};
use crate::model::{RateModel, State, TestFunction};

/// Cell-average densities on the age grid `[j da, (j+1) da)`, per type.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityField {
    pub clock: f64,
    pub da: f64,
    pub densities: Vec<Vec<f64>>,
}

impl DensityField {
    /// Samples `density(type, age)` at cell midpoints on `cells` cells.
    pub fn from_fn(n_types: usize, da: f64, cells: usize, density: impl Fn(usize, f64) -> f64) -> Self {
        let densities = (0..n_types)
            .map(|k| (0..cells).map(|j| density(k, (j as f64 + 0.5) * da)).collect())
            .collect();
        DensityField {
            clock: 0.0,
            da,
            densities,
        }
    }

    pub fn cells(&self) -> usize {
        self.densities.first().map_or(0, Vec::len)
    }

    pub fn n_types(&self) -> usize {
        self.densities.len()
    }

    #[inline]
    pub fn midpoint(&self, j: usize) -> f64 {
        (j as f64 + 0.5) * self.da
    }

    pub fn total_mass(&self) -> f64 {
        self.densities.iter().flatten().sum::<f64>() * self.da
    }

    /// `(f, S)` by the midpoint rule.
    pub fn pair(&self, f: &TestFunction) -> f64 {
        let mut s = 0.0;
        for (kind, row) in self.densities.iter().enumerate() {
            for (j, d) in row.iter().enumerate() {
                if *d != 0.0 {
                    s += d * f.eval(kind, self.midpoint(j));
                }
            }
        }
        s * self.da
    }

    pub fn functionals(&self, model: &RateModel) -> Vec<f64> {
        model.spec.functionals.iter().map(|g| self.pair(g)).collect()
    }

    /// Atoms at cell midpoints carrying the cell masses.
    pub fn to_cohorts(&self) -> CohortMeasure {
        let atoms: Vec<(State, f64)> = self
            .densities
            .iter()
            .enumerate()
            .flat_map(|(k, row)| {
                row.iter()
                    .enumerate()
                    .filter(|(_, d)| **d != 0.0)
                    .map(move |(j, d)| (State::new(k, (j as f64 + 0.5) * self.da), d * self.da))
            })
            .collect();
        let mut m = CohortMeasure::from_atoms(self.n_types(), &atoms).expect("cell atoms are valid");
        m.clock = 0.0;
        m
    }
}

#[derive(Clone, Debug)]
pub struct DensityTrajectory {
    pub times: Vec<f64>,
    pub snapshots: Vec<DensityField>,
}

impl DensityTrajectory {
    pub fn series(&self, f: &TestFunction) -> Vec<f64> {
        self.snapshots.iter().map(|s| s.pair(f)).collect()
    }

    pub fn last(&self) -> &DensityField {
        self.snapshots.last().unwrap()
    }
}

/// Upwind McKendrick solver on a characteristic-aligned grid (`dt = da`).
///
/// Interior cells shift one cell per step with survival evaluated at the
/// mid-step age. The boundary cell takes the trapezoidal integral of the
/// renewal flux over the step; its own contribution to the end-of-step flux
/// is solved for implicitly. `phi` uses the same Heun predictor as the cohort
/// solver.
pub fn solve_density(model: &RateModel, s0: &DensityField, opts: &LimitOptions) -> Result<DensityTrajectory> {
    let steps = opts.steps()?;
    if ((opts.dt - s0.da) / s0.da).abs() > 1e-12 {
        return Err(Error::contract(format!(
            "density solver needs dt = da, got dt = {} and da = {}",
            opts.dt, s0.da
        )));
    }
    if s0.n_types() != model.n_types() {
        return Err(Error::contract("initial density has the wrong number of types"));
    }
    let needed = s0.cells() + steps + 1;
    let mut cur = s0.clone();
    cur.clock = 0.0;
    for row in cur.densities.iter_mut() {
        row.resize(needed, 0.0);
    }
    let mut times = vec![0.0];
    let mut snapshots = vec![cur.clone()];
    for n in 0..steps {
        let t = n as f64 * opts.dt;
        cur.clock = t;
        let phi0 = match &opts.frozen_phi {
            Some(p) => p.clone(),
            None => cur.functionals(model),
        };
        let phi_mid = match &opts.frozen_phi {
            Some(p) => p.clone(),
            None => {
                let predicted = density_step(model, &cur, &phi0, &phi0, &phi0)?;
                let phi1 = predicted.functionals(model);
                phi0.iter().zip(&phi1).map(|(a, b)| 0.5 * (a + b)).collect()
            }
        };
        let phi1: Vec<f64> = phi_mid.iter().zip(&phi0).map(|(m, a)| 2.0 * m - a).collect();
        cur = density_step(model, &cur, &phi0, &phi_mid, &phi1)?;
        let done = n + 1;
        if done % opts.record_stride == 0 || done == steps {
            times.push(done as f64 * opts.dt);
            snapshots.push(cur.clone());
        }
    }
    Ok(DensityTrajectory { times, snapshots })
}

/// [`solve_density`] restricted to two-type (female, male) models.
pub fn solve_density_2sex(model: &RateModel, s0: &DensityField, opts: &LimitOptions) -> Result<DensityTrajectory> {
    if model.n_types() != 2 {
        return Err(Error::contract("two-sex solver needs exactly two types"));
    }
    solve_density(model, s0, opts)
}

fn density_step(
    model: &RateModel,
    cur: &DensityField,
    phi0: &[f64],
    phi_mid: &[f64],
    phi1: &[f64],
) -> Result<DensityField> {
    let k = model.n_types();
    let cells = cur.cells();
    let da = cur.da;
    let dt = da;
    let mut next = DensityField {
        clock: cur.clock + dt,
        da,
        densities: vec![vec![0.0; cells]; k],
    };
    let mut flux_start = vec![0.0; k];
    let mut flux_end = vec![0.0; k];
    for kind in 0..k {
        let row = &cur.densities[kind];
        for j in 0..cells {
            let d = row[j];
            if d == 0.0 {
                continue;
            }
            let a = cur.midpoint(j);
            let start = State::new(kind, a);
            for (i, f) in flux_start.iter_mut().enumerate() {
                *f += d * da * model.n(i, start, phi0);
            }
            let h = model.death_rate(kind, a + 0.5 * dt, phi_mid);
            let moved = d * (-dt * h).exp();
            if j + 1 >= cells {
                if moved > 0.0 {
                    return Err(Error::Integrity("density grid overflow".into()));
                }
                continue;
            }
            next.densities[kind][j + 1] = moved;
            let end = State::new(kind, a + dt);
            for (i, f) in flux_end.iter_mut().enumerate() {
                *f += moved * da * model.n(i, end, phi1);
            }
        }
    }
    // Boundary masses m solve m = dt/2 (B0 e^{-h dt} + B1 + N m).
    let newborn = |i: usize| State::new(i, 0.5 * da);
    let mut a = DMatrix::<f64>::identity(k, k);
    let mut rhs = DVector::<f64>::zeros(k);
    for i in 0..k {
        let h0 = model.death_rate(i, 0.0, phi_mid);
        rhs[i] = 0.5 * dt * (flux_start[i] * (-dt * h0).exp() + flux_end[i]);
        for j in 0..k {
            a[(i, j)] -= 0.5 * dt * model.n(i, newborn(j), phi1);
        }
    }
    let masses = a
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::numerical("boundary system is singular"))?;
    for i in 0..k {
        next.densities[i][0] = masses[i] / da;
    }
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AgeFn, Bounds, Dependence, ModelSpec, OffspringLaw, RateFn};

    fn two_sex(beta: f64, h: f64) -> RateModel {
        RateModel::new(ModelSpec {
            n_types: 2,
            birth: RateFn::new(vec![AgeFn::constant(beta), AgeFn::constant(0.0)], Dependence::None),
            death: RateFn::constant(2, h),
            bearing: vec![
                OffspringLaw::Deterministic { counts: vec![0, 1] },
                OffspringLaw::None,
            ],
            splitting: vec![],
            functionals: vec![],
            immigration: None,
            bounds: Bounds::default(),
            phi_max: None,
        })
        .unwrap()
    }

    #[test]
    fn male_births_track_female_mass() {
        let beta = 0.8;
        let m = two_sex(beta, 0.0);
        let da = 0.01;
        let s0 = DensityField::from_fn(2, da, 100, |k, _| if k == 0 { 1.0 } else { 0.0 });
        let sol = solve_density_2sex(&m, &s0, &LimitOptions::new(0.5, da)).unwrap();
        let last = sol.last();
        let female = last.pair(&TestFunction::indicator(0));
        let male = last.pair(&TestFunction::indicator(1));
        assert!((female - 1.0).abs() < 1e-12);
        assert!((male - beta * 0.5).abs() < 1e-9);
        let rate = last.densities[1][0];
        assert!((rate - beta * female).abs() < 1e-9);
    }

    #[test]
    fn misaligned_grid_rejected() {
        let m = two_sex(1.0, 0.1);
        let s0 = DensityField::from_fn(2, 0.01, 10, |_, _| 1.0);
        assert!(matches!(
            solve_density(&m, &s0, &LimitOptions::new(1.0, 0.02)),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn single_type_exponential_growth() {
        let (b, h) = (1.0, 0.4);
        let m = RateModel::new(ModelSpec {
            n_types: 1,
            birth: RateFn::constant(1, b),
            death: RateFn::constant(1, h),
            bearing: vec![OffspringLaw::Deterministic { counts: vec![1] }],
            splitting: vec![],
            functionals: vec![],
            immigration: None,
            bounds: Bounds::default(),
            phi_max: None,
        })
        .unwrap();
        let da = 1e-3;
        let s0 = DensityField::from_fn(1, da, 1000, |_, _| 1.0);
        let sol = solve_density(&m, &s0, &LimitOptions::new(1.0, da).with_stride(1000)).unwrap();
        let want = ((b - h) * 1.0f64).exp();
        assert!((sol.last().total_mass() / want - 1.0).abs() < 1e-4);
    }
}
