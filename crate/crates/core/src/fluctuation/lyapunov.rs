use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::limit::CohortTrajectory;
use crate::model::{RateModel, State, TestFunction};

/// Mean and covariance of the fluctuation field's cell masses on the age
/// grid `[j da, (j+1) da)`, type-major. Cell 0 of each type receives newborns.
#[derive(Clone, Debug, Serialize)]
pub struct MomentField {
    pub time: f64,
    pub da: f64,
    pub n_types: usize,
    pub cells: usize,
    pub mean: Vec<f64>,
    /// Row-major `dim x dim`.
    pub cov: Vec<f64>,
}

impl MomentField {
    pub fn dim(&self) -> usize {
        self.n_types * self.cells
    }

    /// `f` sampled at cell midpoints.
    pub fn grid_vector(&self, f: &TestFunction) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dim());
        for kind in 0..self.n_types {
            for j in 0..self.cells {
                v.push(f.eval(kind, (j as f64 + 0.5) * self.da));
            }
        }
        v
    }

    /// `f^T Sigma f`.
    pub fn variance(&self, f: &TestFunction) -> f64 {
        let v = self.grid_vector(f);
        let n = self.dim();
        let mut s = 0.0;
        for r in 0..n {
            if v[r] == 0.0 {
                continue;
            }
            let row = &self.cov[r * n..(r + 1) * n];
            s += v[r] * row.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>();
        }
        s
    }

    /// `(f, nu)`.
    pub fn mean_of(&self, f: &TestFunction) -> f64 {
        self.grid_vector(f).iter().zip(&self.mean).map(|(a, b)| a * b).sum()
    }

    pub fn diagonal(&self) -> Vec<f64> {
        let n = self.dim();
        (0..n).map(|r| self.cov[r * n + r]).collect()
    }

    pub fn trace(&self) -> f64 {
        self.diagonal().iter().sum()
    }

    /// Smallest eigenvalue of the covariance.
    pub fn min_eigenvalue(&self) -> f64 {
        let n = self.dim();
        let m = DMatrix::from_row_slice(n, n, &self.cov);
        m.symmetric_eigenvalues().iter().copied().fold(f64::INFINITY, f64::min)
    }
}

#[derive(Clone, Debug)]
pub struct LyapunovOptions {
    pub da: f64,
    pub t_end: f64,
    /// Snapshot interval; the final time is always recorded.
    pub record_every: f64,
    /// Admissible negative eigenvalue, relative to the trace.
    pub psd_tolerance: f64,
}

impl LyapunovOptions {
    pub fn new(t_end: f64, da: f64) -> Self {
        LyapunovOptions {
            da,
            t_end,
            record_every: t_end,
            psd_tolerance: 1e-8,
        }
    }
}

/// Coefficients of the linearized dynamics in Lagrangian slots: slot 0 of each
/// type collects newborns, slot `j + 1` follows cell `j` along its
/// characteristic during the step.
struct Coeffs {
    /// Death rate per slot.
    h: Vec<f64>,
    /// `births[i][c] = n^i` of slot `c`.
    births: Vec<Vec<f64>>,
    /// Feedback loadings `u[r][j]` and functional values `g[c][j]`.
    u: Vec<Vec<f64>>,
    g: Vec<Vec<f64>>,
    /// Martingale covariance rate.
    q: Vec<f64>,
}

struct Grid {
    k: usize,
    cells: usize,
    d: usize,
    da: f64,
}

impl Grid {
    fn dim(&self) -> usize {
        self.k * self.cells
    }

    fn newborn_slot(&self, kind: usize) -> usize {
        kind * self.cells
    }

    fn slot_age(&self, j: usize, s: f64) -> f64 {
        if j == 0 {
            0.5 * s
        } else {
            (j as f64 - 0.5) * self.da + s
        }
    }
}

fn coefficients(model: &RateModel, grid: &Grid, mass: &[f64], phi: &[f64], s: f64) -> Result<Coeffs> {
    let n = grid.dim();
    let (k, d) = (grid.k, grid.d);
    let mut h = vec![0.0; n];
    let mut births = vec![vec![0.0; n]; k];
    let mut u = vec![vec![0.0; d]; n];
    let mut g = vec![vec![0.0; d]; n];
    let mut q = vec![0.0; n * n];
    let mut grad = vec![0.0; d];
    let mut newborn_feedback = vec![vec![0.0; d]; k];
    for kind in 0..k {
        for j in 0..grid.cells {
            let c = kind * grid.cells + j;
            let st = State::new(kind, grid.slot_age(j, s));
            h[c] = model.death_rate(kind, st.age, phi);
            for (i, row) in births.iter_mut().enumerate() {
                row[c] = model.n(i, st, phi);
            }
            for (jj, gf) in model.spec.functionals.iter().enumerate() {
                g[c][jj] = gf.eval(kind, st.age);
            }
            let m = mass[c];
            if m == 0.0 {
                continue;
            }
            if d > 0 {
                grad.iter_mut().for_each(|x| *x = 0.0);
                model.death_gradient(st, phi, &mut grad)?;
                for jj in 0..d {
                    u[c][jj] -= m * grad[jj];
                }
                for (i, fb) in newborn_feedback.iter_mut().enumerate() {
                    grad.iter_mut().for_each(|x| *x = 0.0);
                    model.n_gradient(i, st, phi, &mut grad)?;
                    for jj in 0..d {
                        fb[jj] += m * grad[jj];
                    }
                }
            }
            // Polarized quadratic variation at this slot.
            let b = model.birth_rate(kind, st.age, phi);
            let bearing = model.bearing(kind);
            let split = model.splitting(kind);
            q[c * n + c] += m * h[c];
            for i1 in 0..k {
                let r1 = grid.newborn_slot(i1);
                let cross = -m * h[c] * split.mean()[i1];
                q[r1 * n + c] += cross;
                q[c * n + r1] += cross;
                for i2 in 0..k {
                    let r2 = grid.newborn_slot(i2);
                    q[r1 * n + r2] += m * (b * bearing.gamma(i1, i2) + h[c] * split.gamma(i1, i2));
                }
            }
        }
    }
    for (i, fb) in newborn_feedback.iter().enumerate() {
        let r = grid.newborn_slot(i);
        for jj in 0..d {
            u[r][jj] += fb[jj];
        }
    }
    Ok(Coeffs { h, births, u, g, q })
}

/// `A x` for a vector.
fn apply_vec(grid: &Grid, co: &Coeffs, x: &[f64]) -> Vec<f64> {
    let n = grid.dim();
    let p: Vec<f64> = (0..grid.d).map(|j| (0..n).map(|c| co.g[c][j] * x[c]).sum()).collect();
    let mut out: Vec<f64> = (0..n).map(|r| -co.h[r] * x[r]).collect();
    for r in 0..n {
        out[r] += co.u[r].iter().zip(&p).map(|(a, b)| a * b).sum::<f64>();
    }
    for (i, row) in co.births.iter().enumerate() {
        out[grid.newborn_slot(i)] += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
    out
}

/// `A S + S A^T + Q` for symmetric `S`.
fn lyapunov_rhs(grid: &Grid, co: &Coeffs, sigma: &[f64]) -> Vec<f64> {
    let n = grid.dim();
    let mut a_s = vec![0.0; n * n];
    for r in 0..n {
        let hr = co.h[r];
        let src = &sigma[r * n..(r + 1) * n];
        let dst = &mut a_s[r * n..(r + 1) * n];
        for (o, v) in dst.iter_mut().zip(src) {
            *o = -hr * v;
        }
    }
    // Feedback through the functionals: u_r (g^T S).
    for j in 0..grid.d {
        let mut p = vec![0.0; n];
        for c in 0..n {
            let gc = co.g[c][j];
            if gc != 0.0 {
                for (pv, sv) in p.iter_mut().zip(&sigma[c * n..(c + 1) * n]) {
                    *pv += gc * sv;
                }
            }
        }
        for r in 0..n {
            let ur = co.u[r][j];
            if ur != 0.0 {
                for (o, pv) in a_s[r * n..(r + 1) * n].iter_mut().zip(&p) {
                    *o += ur * pv;
                }
            }
        }
    }
    // Renewal rows.
    for (i, row) in co.births.iter().enumerate() {
        let r = grid.newborn_slot(i);
        let mut acc = vec![0.0; n];
        for (c, &w) in row.iter().enumerate() {
            if w != 0.0 {
                for (a, sv) in acc.iter_mut().zip(&sigma[c * n..(c + 1) * n]) {
                    *a += w * sv;
                }
            }
        }
        for (o, a) in a_s[r * n..(r + 1) * n].iter_mut().zip(&acc) {
            *o += a;
        }
    }
    let mut out = co.q.clone();
    for r in 0..n {
        for c in 0..n {
            out[r * n + c] += a_s[r * n + c] + a_s[c * n + r];
        }
    }
    out
}

/// Moves every cell one slot older within each type and opens an empty
/// newborn slot; the oldest cell must be empty.
fn shift_vec(grid: &Grid, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for kind in 0..grid.k {
        let base = kind * grid.cells;
        for j in 0..grid.cells - 1 {
            out[base + j + 1] = x[base + j];
        }
    }
    out
}

fn shift_matrix(grid: &Grid, s: &[f64]) -> Vec<f64> {
    let n = grid.dim();
    let map = |r: usize| {
        let (kind, j) = (r / grid.cells, r % grid.cells);
        (j + 1 < grid.cells).then_some(kind * grid.cells + j + 1)
    };
    let mut out = vec![0.0; n * n];
    for r in 0..n {
        let Some(r2) = map(r) else { continue };
        for c in 0..n {
            if let Some(c2) = map(c) {
                out[r2 * n + c2] = s[r * n + c];
            }
        }
    }
    out
}

/// Propagates the limiting mean `nu` and covariance `Sigma` of the
/// fluctuation field from `Z_0 = 0`.
///
/// Each step of length `da` moves every cell along its characteristic by one
/// cell (exact transport) and integrates the remaining linear dynamics
/// (death, renewal into the newborn slots, feedback through the dependence
/// functionals, martingale noise) with Heun's method in Lagrangian slots.
/// The limit trajectory must have a snapshot at every multiple of `da`.
pub fn lyapunov_moments(model: &RateModel, limit: &CohortTrajectory, opts: &LyapunovOptions) -> Result<Vec<MomentField>> {
    let da = opts.da;
    if !(da > 0.0) || !(opts.t_end >= da) {
        return Err(Error::contract("need 0 < da <= T"));
    }
    let steps = (opts.t_end / da).round() as usize;
    if ((steps as f64) * da - opts.t_end).abs() > 1e-9 * opts.t_end {
        return Err(Error::contract("T must be an integer multiple of da"));
    }
    if model.n_functionals() > 0 && !model.has_derivatives() {
        return Err(Error::FeatureUnavailable(
            "fluctuation moments need rate derivatives with respect to the functionals".into(),
        ));
    }
    let snapshot = |n: usize| {
        let t = n as f64 * da;
        limit
            .at(t)
            .ok_or_else(|| Error::contract(format!("limit trajectory has no snapshot at t = {t}")))
    };
    let a_star = snapshot(0)?.max_age();
    let grid = Grid {
        k: model.n_types(),
        cells: ((opts.t_end + a_star) / da).ceil() as usize + 2,
        d: model.n_functionals(),
        da,
    };
    let n = grid.dim();
    let mut mean = vec![0.0; n];
    let mut sigma = vec![0.0; n * n];
    let record_stride = ((opts.record_every / da).round() as usize).max(1);
    let field = |t: f64, mean: &[f64], sigma: &[f64]| MomentField {
        time: t,
        da,
        n_types: grid.k,
        cells: grid.cells,
        mean: mean.to_vec(),
        cov: sigma.to_vec(),
    };
    let mut out = vec![field(0.0, &mean, &sigma)];
    let flatten = |bins: Vec<Vec<f64>>| bins.into_iter().flatten().collect::<Vec<f64>>();
    for step in 0..steps {
        let m0 = snapshot(step)?;
        let m1 = snapshot(step + 1)?;
        let phi0 = m0.functionals(model);
        let phi1 = m1.functionals(model);
        let mass0 = shift_vec(&grid, &flatten(m0.bin(da, grid.cells)));
        let mass1 = flatten(m1.bin(da, grid.cells));
        let c0 = coefficients(model, &grid, &mass0, &phi0, 0.0)?;
        let c1 = coefficients(model, &grid, &mass1, &phi1, da)?;

        mean = shift_vec(&grid, &mean);
        sigma = shift_matrix(&grid, &sigma);
        let k0 = apply_vec(&grid, &c0, &mean);
        let pred: Vec<f64> = mean.iter().zip(&k0).map(|(x, k)| x + da * k).collect();
        let k1 = apply_vec(&grid, &c1, &pred);
        for r in 0..n {
            mean[r] += 0.5 * da * (k0[r] + k1[r]);
        }
        let f0 = lyapunov_rhs(&grid, &c0, &sigma);
        let pred: Vec<f64> = sigma.iter().zip(&f0).map(|(x, k)| x + da * k).collect();
        let f1 = lyapunov_rhs(&grid, &c1, &pred);
        for r in 0..n * n {
            sigma[r] += 0.5 * da * (f0[r] + f1[r]);
        }
        for r in 0..n {
            for c in 0..r {
                let v = 0.5 * (sigma[r * n + c] + sigma[c * n + r]);
                sigma[r * n + c] = v;
                sigma[c * n + r] = v;
            }
        }
        let done = step + 1;
        if done % record_stride == 0 || done == steps {
            let f = field(done as f64 * da, &mean, &sigma);
            let tr = f.trace();
            if tr > 0.0 {
                let min = f.min_eigenvalue();
                if min < -opts.psd_tolerance * tr {
                    return Err(Error::Numerical(format!(
                        "covariance lost positive semi-definiteness at step {done} (t = {}): \
                         min eigenvalue {min:.3e}, trace {tr:.3e}",
                        f.time
                    )));
                }
            }
            out.push(f);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::limit::{solve_limit, CohortMeasure, LimitOptions};
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
            bounds: Bounds::default(),
            phi_max: None,
        })
        .unwrap()
    }

    fn run(m: &RateModel, t: f64, da: f64) -> Vec<MomentField> {
        let s0 = CohortMeasure::from_atoms(1, &[(State::new(0, 0.0), 1.0)]).unwrap();
        let dt = da / 10.0;
        let lim = solve_limit(m, &s0, &LimitOptions::new(t, dt).recording_every(da)).unwrap();
        lyapunov_moments(m, &lim, &LyapunovOptions::new(t, da)).unwrap()
    }

    #[test]
    fn zero_rates_give_zero_covariance() {
        let f = run(&bd(0.0, 0.0), 1.0, 0.05);
        assert!(f.last().unwrap().cov.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_rate_variance_matches_scalar_ode() {
        let (b, h, t) = (0.5, 0.3, 2.0);
        let f = run(&bd(b, h), t, 0.01);
        // v' = 2 (b - h) v + (b + h) e^{(b - h) t}, v(0) = 0.
        let r = b - h;
        let want = (b + h) * (r * t).exp() * ((r * t).exp() - 1.0) / r;
        let got = f.last().unwrap().variance(&TestFunction::total());
        assert!((got / want - 1.0).abs() < 1e-3, "{got} vs {want}");
    }

    #[test]
    fn pure_death_is_binomial_thinning() {
        let (h, t) = (0.7, 1.5);
        let f = run(&bd(0.0, h), t, 0.01);
        let p = (-h * t).exp();
        let got = f.last().unwrap().variance(&TestFunction::total());
        assert!((got / (p * (1.0 - p)) - 1.0).abs() < 1e-3);
    }

    #[test]
    fn logistic_feedback_matches_scalar_lyapunov_ode() {
        use crate::model::{AgeFn, Dependence};
        let (beta, cap, h, t) = (2.0, 3.0, 0.5, 2.0);
        let m = RateModel::new(ModelSpec {
            n_types: 1,
            birth: RateFn::new(
                vec![AgeFn::constant(beta)],
                Dependence::Logistic {
                    functional: 0,
                    capacity: cap,
                },
            ),
            death: RateFn::constant(1, h),
            bearing: vec![OffspringLaw::Deterministic { counts: vec![1] }],
            splitting: vec![],
            functionals: vec![TestFunction::total()],
            immigration: None,
            bounds: Bounds::default(),
            phi_max: None,
        })
        .unwrap();
        let x0 = 0.4;
        let s0 = CohortMeasure::from_atoms(1, &[(State::new(0, 0.0), x0)]).unwrap();
        let da = 0.01;
        let lim = solve_limit(&m, &s0, &LimitOptions::new(t, da / 10.0).recording_every(da)).unwrap();
        let got = lyapunov_moments(&m, &lim, &LyapunovOptions::new(t, da))
            .unwrap()
            .last()
            .unwrap()
            .variance(&TestFunction::total());
        // x' = x (b(x) - h), v' = 2 (b(x) - h + x b'(x)) v + (b(x) + h) x by RK4.
        let rhs = |y: [f64; 2]| {
            let (x, v) = (y[0], y[1]);
            let b = beta * (1.0 - x / cap);
            let a = b - h - beta * x / cap;
            [x * (b - h), 2.0 * a * v + (b + h) * x]
        };
        let mut y = [x0, 0.0];
        let n = 20_000;
        let dt = t / n as f64;
        for _ in 0..n {
            let k1 = rhs(y);
            let k2 = rhs([y[0] + 0.5 * dt * k1[0], y[1] + 0.5 * dt * k1[1]]);
            let k3 = rhs([y[0] + 0.5 * dt * k2[0], y[1] + 0.5 * dt * k2[1]]);
            let k4 = rhs([y[0] + dt * k3[0], y[1] + dt * k3[1]]);
            for i in 0..2 {
                y[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
        }
        assert!((got / y[1] - 1.0).abs() < 1e-3, "{got} vs {}", y[1]);
    }

    #[test]
    fn renewal_row_matches_generator_on_delta_vectors() {
        // For a unit mass in slot c, the newborn-slot component of A e_c is
        // the renewal term of L applied to the newborn indicator: n^0(c).
        let m = bd(0.9, 0.2);
        let grid = Grid {
            k: 1,
            cells: 5,
            d: 0,
            da: 0.1,
        };
        let co = coefficients(&m, &grid, &[0.0; 5], &[], 0.0).unwrap();
        for c in 1..5 {
            let mut e = vec![0.0; 5];
            e[c] = 1.0;
            let ae = apply_vec(&grid, &co, &e);
            let s = State::new(0, grid.slot_age(c, 0.0));
            let f = TestFunction::indicator(0);
            let renewal = m.generator_apply(&f, s, &[]).unwrap() + m.death_rate(0, s.age, &[]);
            assert!((ae[0] - renewal).abs() < 1e-14);
            assert!((ae[c] + 0.2).abs() < 1e-14);
        }
    }
}
