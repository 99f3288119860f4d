//! Deterministic large-population limit: a weighted-cohort solver and an
//! aligned-grid density solver.

pub mod cohort;
pub mod density;

pub use cohort::{merge_light_cohorts, solve_limit, Cohort, CohortMeasure, CohortTrajectory, LimitOptions};
pub use density::{solve_density, solve_density_2sex, DensityField, DensityTrajectory};

use crate::error::{Error, Result};
use crate::model::{gauss_legendre_mean, RateModel};

/// Largest relative gap between the cohort solution in a frozen environment
/// `phi` and the explicit mild solution of its initial part: each initial
/// atom shifted by `t` and weighted by `exp(-int_0^t h(a + s, phi) ds)`.
pub fn frozen_environment_error(model: &RateModel, s0: &CohortMeasure, phi: &[f64], t_end: f64, dt: f64) -> Result<f64> {
    if phi.len() != model.n_functionals() {
        return Err(Error::contract("frozen environment has the wrong dimension"));
    }
    let mut opts = LimitOptions::new(t_end, dt);
    opts.frozen_phi = Some(phi.to_vec());
    opts.mass_floor = 0.0;
    opts.record_stride = usize::MAX;
    let sol = solve_limit(model, s0, &opts)?;
    let last = sol.last();
    let mut worst: f64 = 0.0;
    for (kind, cs) in s0.types.iter().enumerate() {
        for c in cs {
            let a0 = s0.clock - c.birth_time;
            let hazard = t_end * gauss_legendre_mean(|s| model.death_rate(kind, a0 + s, phi), 0.0, t_end, 64);
            let want = c.mass * (-hazard).exp();
            let tau = c.birth_time - s0.clock;
            let got = last.types[kind]
                .iter()
                .find(|x| (x.birth_time - tau).abs() < 1e-9)
                .map_or(0.0, |x| x.mass);
            if want > 0.0 {
                worst = worst.max((got / want - 1.0).abs());
            }
        }
    }
    Ok(worst)
}
