use serde::Serialize;

use crate::error::{Error, Result};
use crate::limit::CohortTrajectory;
use crate::model::{InitialCondition, RateModel, TestFunction};
use crate::parallel::ordered_map;
use crate::simulator::{simulate, SimOptions};

/// `(f, Z^K_t) = sqrt(K) ((f, S^K_t / K) - (f, S_t))` on a time grid, for one
/// replicate at one K.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FluctuationSample {
    pub k: u64,
    pub replicate: u64,
    pub times: Vec<f64>,
    /// `z[f][g]`
    pub z: Vec<Vec<f64>>,
    /// `(f, S^K_t) / K`, same layout.
    pub scaled: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct ZOptions {
    pub t_end: f64,
    pub k_list: Vec<u64>,
    pub replicates: usize,
    pub grid: Vec<f64>,
    pub master_seed: u64,
    pub workers: Option<usize>,
}

/// Simulates every `(K, replicate)` pair and evaluates the fluctuation field
/// against `limit`, which must hold a snapshot at every grid time.
pub fn estimate_z(
    model: &RateModel,
    initial: &InitialCondition,
    limit: &CohortTrajectory,
    fs: &[TestFunction],
    opts: &ZOptions,
) -> Result<Vec<FluctuationSample>> {
    let reference: Vec<Vec<f64>> = fs
        .iter()
        .map(|f| {
            opts.grid
                .iter()
                .map(|&t| {
                    limit.at(t).map(|m| m.pair(f)).ok_or_else(|| {
                        Error::contract(format!("limit trajectory has no snapshot at t = {t}"))
                    })
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    let mut jobs = Vec::new();
    for &k in &opts.k_list {
        for r in 0..opts.replicates as u64 {
            jobs.push((k, r));
        }
    }
    let sim_opts = |k: u64| {
        SimOptions::new(opts.t_end, k)
            .with_grid(opts.grid.clone())
            .with_observables(fs.to_vec())
            .without_events()
    };
    ordered_map(opts.workers, &jobs, |&(k, r)| {
        let s0 = initial.population(model.n_types(), k)?;
        let traj = simulate(model, &s0, &sim_opts(k), opts.master_seed, r)?;
        let kf = k as f64;
        let scaled: Vec<Vec<f64>> = traj
            .series
            .iter()
            .map(|row| row.iter().map(|v| v / kf).collect())
            .collect();
        let z = scaled
            .iter()
            .zip(&reference)
            .map(|(row, lim)| row.iter().zip(lim).map(|(s, l)| kf.sqrt() * (s - l)).collect())
            .collect();
        Ok(FluctuationSample {
            k,
            replicate: r,
            times: opts.grid.clone(),
            z,
            scaled,
        })
    })
}

/// Values of `(f_j, Z^K)` at grid index `g` across the replicates at `k`.
pub fn z_values(samples: &[FluctuationSample], k: u64, j: usize, g: usize) -> Vec<f64> {
    samples
        .iter()
        .filter(|s| s.k == k)
        .map(|s| s.z[j][g])
        .collect()
}
