//! Martingale residuals and quadratic variations reconstructed from an event log.
//!
//! Rates factor as `profile(i, v) * D(phi)`, so between events the compensator
//! integrand of each individual is a fixed combination of age profiles with
//! weights `D(phi)`. The age integrals of those profiles are tabulated once
//! (cumulative Gauss-Legendre with cubic Hermite interpolation), which makes
//! each inter-event gap cost O(N) independent of its length. When a
//! functional depends on age, `phi` drifts within a gap and the gap is cut
//! into substeps of length at most `substep`, with `D` taken at substep
//! midpoints.

use serde::Serialize;

use super::{apply_event, EventKind, PhiTracker, Trajectory};
use crate::error::{Error, Result};
use crate::model::{Population, RateModel, TestFunction};

/// Cumulative integral of a function of age on `[0, hi]`.
#[derive(Clone, Debug)]
pub(crate) struct AgeIntegral {
    step: f64,
    cumulative: Vec<f64>,
    values: Vec<f64>,
}

impl AgeIntegral {
    pub(crate) fn build(c: impl Fn(f64) -> f64, hi: f64, cells: usize) -> Self {
        let step = hi / cells as f64;
        // Three-point Gauss-Legendre per cell.
        let nodes = [-(0.6f64).sqrt(), 0.0, (0.6f64).sqrt()];
        let weights = [5.0 / 9.0, 8.0 / 9.0, 5.0 / 9.0];
        let mut cumulative = Vec::with_capacity(cells + 1);
        let mut values = Vec::with_capacity(cells + 1);
        let mut acc = 0.0;
        cumulative.push(0.0);
        values.push(c(0.0));
        for j in 0..cells {
            let mid = (j as f64 + 0.5) * step;
            let mut s = 0.0;
            for (x, w) in nodes.iter().zip(&weights) {
                s += w * c(mid + 0.5 * step * x);
            }
            acc += 0.5 * step * s;
            cumulative.push(acc);
            values.push(c((j + 1) as f64 * step));
        }
        AgeIntegral {
            step,
            cumulative,
            values,
        }
    }

    #[inline]
    pub(crate) fn eval(&self, v: f64) -> f64 {
        let last = self.cumulative.len() - 1;
        let x = v / self.step;
        if x >= last as f64 {
            let top = last as f64 * self.step;
            return self.cumulative[last] + (v - top) * self.values[last];
        }
        let j = (x.max(0.0)) as usize;
        let t = x - j as f64;
        let (y0, y1) = (self.cumulative[j], self.cumulative[j + 1]);
        let (d0, d1) = (self.values[j] * self.step, self.values[j + 1] * self.step);
        let t2 = t * t;
        let t3 = t2 * t;
        (2.0 * t3 - 3.0 * t2 + 1.0) * y0
            + (t3 - 2.0 * t2 + t) * d0
            + (-2.0 * t3 + 3.0 * t2) * y1
            + (t3 - t2) * d1
    }
}

struct TypeTables {
    /// coefficient of the death dependence in `L f`
    death: AgeIntegral,
    /// coefficient of the birth dependence in `L f`
    birth: AgeIntegral,
    /// coefficient of the birth dependence in `Pi f`
    qv_birth: AgeIntegral,
    /// coefficient of the death dependence in `Pi f`
    qv_death: AgeIntegral,
}

struct FnTables {
    f: TestFunction,
    newborn: Vec<f64>,
    types: Vec<TypeTables>,
    /// `(int f dK, int f^2 dK)` for immigration.
    kernel: (f64, f64),
}

/// Per-function time series on the trajectory grid.
#[derive(Clone, Debug, Serialize)]
pub struct MartingaleSeries {
    pub name: String,
    pub times: Vec<f64>,
    /// `(f, S_t)`
    pub values: Vec<f64>,
    /// `int_0^t (L f, S_u) du` plus the immigration drift
    pub compensator: Vec<f64>,
    /// `M^f_t`
    pub residual: Vec<f64>,
    /// `[M^f]_t`, the sum of squared jumps
    pub bracket: Vec<f64>,
    /// `<M^f>_t`
    pub predictable: Vec<f64>,
    /// Set when substep quadrature was needed and the substep is coarser than
    /// the mean inter-event gap.
    pub coarse_quadrature: bool,
}

impl MartingaleSeries {
    pub fn final_residual(&self) -> f64 {
        *self.residual.last().unwrap()
    }

    pub fn final_bracket(&self) -> f64 {
        *self.bracket.last().unwrap()
    }

    pub fn final_predictable(&self) -> f64 {
        *self.predictable.last().unwrap()
    }
}

/// Reusable analyzer: tables are built once per (model, test functions, omega).
pub struct MartingaleAnalyzer<'a> {
    model: &'a RateModel,
    fns: Vec<FnTables>,
    omega: f64,
    batch: (f64, f64),
    /// Substep for age-dependent functionals; `None` means `T / 10^4`.
    pub substep: Option<f64>,
}

const TABLE_CELLS: usize = 8192;

impl<'a> MartingaleAnalyzer<'a> {
    pub fn new(model: &'a RateModel, fs: &[TestFunction], omega: f64) -> Result<Self> {
        if !(omega > 0.0) {
            return Err(Error::contract("omega must be positive"));
        }
        let hi = omega * (1.0 + 1e-9) + 1e-9;
        let mut fns = Vec::with_capacity(fs.len());
        for f in fs {
            if !f.is_c1() {
                return Err(Error::contract(format!(
                    "martingale residual needs a C1 test function; '{}' is not",
                    f.name
                )));
            }
            let newborn = model.newborn_values(f);
            let mut types = Vec::with_capacity(model.n_types());
            for i in 0..model.n_types() {
                let bear = model.bearing(i);
                let split = model.splitting(i);
                let bear_mean = bear.mean_dot(&newborn);
                let split_mean = split.mean_dot(&newborn);
                let bear_gamma = bear.gamma_form(&newborn);
                let split_gamma = split.gamma_form(&newborn);
                let birth = &model.spec.birth.profiles[i];
                let death = &model.spec.death.profiles[i];
                types.push(TypeTables {
                    death: AgeIntegral::build(
                        |v| death.value(v) * (split_mean - f.eval(i, v)),
                        hi,
                        TABLE_CELLS,
                    ),
                    birth: AgeIntegral::build(|v| birth.value(v) * bear_mean, hi, TABLE_CELLS),
                    qv_birth: AgeIntegral::build(|v| birth.value(v) * bear_gamma, hi, TABLE_CELLS),
                    qv_death: AgeIntegral::build(
                        |v| {
                            let fv = f.eval(i, v);
                            death.value(v) * (split_gamma + fv * fv - 2.0 * fv * split_mean)
                        },
                        hi,
                        TABLE_CELLS,
                    ),
                });
            }
            let kernel = match model.immigration() {
                Some(im) => (
                    im.kernel_integral(|k, v| f.eval(k, v)),
                    im.kernel_integral(|k, v| f.eval(k, v).powi(2)),
                ),
                None => (0.0, 0.0),
            };
            fns.push(FnTables {
                f: f.clone(),
                newborn,
                types,
                kernel,
            });
        }
        let batch = match model.immigration() {
            Some(im) => im.batch_moments()?,
            None => (0.0, 0.0),
        };
        Ok(MartingaleAnalyzer {
            model,
            fns,
            omega,
            batch,
            substep: None,
        })
    }

    pub fn analyze(&self, traj: &Trajectory) -> Result<Vec<MartingaleSeries>> {
        if traj.events.len() != traj.event_count {
            return Err(Error::contract("trajectory was recorded without its event log"));
        }
        if traj.omega() > self.omega * (1.0 + 1e-9) {
            return Err(Error::contract(format!(
                "trajectory omega {} exceeds the analyzer's {}",
                traj.omega(),
                self.omega
            )));
        }
        let nf = self.fns.len();
        let ng = traj.grid.len();
        let mut out: Vec<MartingaleSeries> = self
            .fns
            .iter()
            .map(|t| MartingaleSeries {
                name: t.f.name.clone(),
                times: traj.grid.clone(),
                values: Vec::with_capacity(ng),
                compensator: Vec::with_capacity(ng),
                residual: Vec::with_capacity(ng),
                bracket: Vec::with_capacity(ng),
                predictable: Vec::with_capacity(ng),
                coarse_quadrature: false,
            })
            .collect();
        let substep = self.substep.unwrap_or(traj.t_end / 1e4);
        let drifting_phi = self.model.age_free_functionals().is_none();
        let mean_gap = traj.t_end / (traj.event_count as f64 + 1.0);
        let coarse = drifting_phi && substep > mean_gap;

        let mut pop = traj.initial.clone();
        let mut tracker = PhiTracker::new(self.model, traj.k as f64);
        let initial: Vec<f64> = self.fns.iter().map(|t| pop.pair(&t.f)).collect();
        let mut comp = vec![0.0; nf];
        let mut bracket = vec![0.0; nf];
        let mut pred = vec![0.0; nf];
        let mut t = 0.0;
        let mut gi = 0;

        let record = |pop: &mut Population,
                          at: f64,
                          comp: &[f64],
                          bracket: &[f64],
                          pred: &[f64],
                          out: &mut Vec<MartingaleSeries>| {
            pop.clock = at;
            for (j, tab) in self.fns.iter().enumerate() {
                let v = pop.pair(&tab.f);
                let s = &mut out[j];
                s.values.push(v);
                s.compensator.push(comp[j]);
                s.residual.push(v - initial[j] - comp[j]);
                s.bracket.push(bracket[j]);
                s.predictable.push(pred[j]);
            }
        };

        let mut jumps = vec![0.0; nf];
        for e in traj.events.iter().map(Some).chain(std::iter::once(None)) {
            let target = e.map(|e| e.time).unwrap_or(traj.t_end);
            while gi < ng && (traj.grid[gi] < target || (e.is_none() && traj.grid[gi] <= target)) {
                let g = traj.grid[gi];
                self.integrate(&mut pop, &mut tracker, t, g, substep, drifting_phi, &mut comp, &mut pred);
                t = g;
                record(&mut pop, g, &comp, &bracket, &pred, &mut out);
                gi += 1;
            }
            let Some(e) = e else { break };
            self.integrate(&mut pop, &mut tracker, t, target, substep, drifting_phi, &mut comp, &mut pred);
            t = target;
            pop.clock = target;
            jumps.iter_mut().for_each(|x| *x = 0.0);
            match e.kind {
                EventKind::Immigration => {
                    for s in &e.immigrants {
                        for (j, tab) in self.fns.iter().enumerate() {
                            jumps[j] += tab.f.eval(s.kind, s.age);
                        }
                    }
                }
                _ => {
                    for (j, tab) in self.fns.iter().enumerate() {
                        jumps[j] += e
                            .offspring
                            .iter()
                            .zip(&tab.newborn)
                            .map(|(&c, f0)| c as f64 * f0)
                            .sum::<f64>();
                    }
                }
            }
            if let Some(x) = apply_event(&mut pop, e)? {
                let age = target - x.birth_time;
                for (j, tab) in self.fns.iter().enumerate() {
                    jumps[j] -= tab.f.eval(x.kind, age);
                }
            }
            for j in 0..nf {
                bracket[j] += jumps[j] * jumps[j];
            }
        }
        for s in out.iter_mut() {
            s.coarse_quadrature = coarse;
        }
        Ok(out)
    }

    #[allow(clippy::too_many_arguments)]
    fn integrate(
        &self,
        pop: &mut Population,
        tracker: &mut PhiTracker,
        t0: f64,
        t1: f64,
        substep: f64,
        drifting_phi: bool,
        comp: &mut [f64],
        pred: &mut [f64],
    ) {
        if t1 <= t0 {
            return;
        }
        let pieces = if drifting_phi {
            ((t1 - t0) / substep).ceil().max(1.0) as usize
        } else {
            1
        };
        let h = (t1 - t0) / pieces as f64;
        for p in 0..pieces {
            let a = t0 + p as f64 * h;
            let b = if p + 1 == pieces { t1 } else { a + h };
            pop.clock = 0.5 * (a + b);
            let phi = tracker.update(pop).to_vec();
            self.integrate_piece(pop, a, b, &phi, comp, pred);
        }
        pop.clock = t1;
    }

    fn integrate_piece(
        &self,
        pop: &Population,
        t0: f64,
        t1: f64,
        phi: &[f64],
        comp: &mut [f64],
        pred: &mut [f64],
    ) {
        let dt = t1 - t0;
        let d_birth = self.model.spec.birth.dependence.factor(phi);
        let d_death = self.model.spec.death.dependence.factor(phi);
        for (j, tab) in self.fns.iter().enumerate() {
            let mut c = 0.0;
            let mut q = 0.0;
            for x in pop.members() {
                let a0 = t0 - x.birth_time;
                let a1 = t1 - x.birth_time;
                let tt = &tab.types[x.kind];
                c += tab.f.eval(x.kind, a1) - tab.f.eval(x.kind, a0)
                    + d_death * (tt.death.eval(a1) - tt.death.eval(a0))
                    + d_birth * (tt.birth.eval(a1) - tt.birth.eval(a0));
                q += d_birth * (tt.qv_birth.eval(a1) - tt.qv_birth.eval(a0))
                    + d_death * (tt.qv_death.eval(a1) - tt.qv_death.eval(a0));
            }
            if let Some(im) = self.model.immigration() {
                let g = im.arrival_rate(phi);
                let (m, v) = self.batch;
                let (k1, k2) = tab.kernel;
                c += dt * g * m * k1;
                q += dt * g * (m * k2 + (v - m) * k1 * k1);
            }
            comp[j] += c;
            pred[j] += q;
        }
    }
}

/// `M^f_t` on the trajectory grid for a single test function.
pub fn martingale_residual(model: &RateModel, traj: &Trajectory, f: &TestFunction) -> Result<MartingaleSeries> {
    let analyzer = MartingaleAnalyzer::new(model, std::slice::from_ref(f), traj.omega())?;
    Ok(analyzer.analyze(traj)?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::AgeFn;

    #[test]
    fn age_integral_of_polynomial_is_exact() {
        let t = AgeIntegral::build(|v| 1.0 + 2.0 * v + 3.0 * v * v, 4.0, 64);
        for &v in &[0.0, 0.3, 1.7, 3.99, 4.0] {
            let want = v + v * v + v * v * v;
            assert!((t.eval(v) - want).abs() < 1e-10, "{v}");
        }
    }

    #[test]
    fn age_integral_of_window_is_accurate() {
        let w = AgeFn::window(1.0, 2.0, 0.5);
        let t = AgeIntegral::build(|v| w.value(v), 4.0, 4096);
        // Symmetric ramps: the integral of the window equals its nominal width.
        assert!((t.eval(4.0) - 1.0).abs() < 1e-10);
        assert!((t.eval(1.5) - 0.5).abs() < 1e-10);
    }
}
