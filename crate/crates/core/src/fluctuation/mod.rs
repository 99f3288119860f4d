//! Fluctuations around the deterministic limit: replicate estimates of
//! `Z^K`, the limiting Gaussian moments on an age grid, and verdicts.

pub mod lyapunov;
pub mod report;
pub mod sample;

pub use lyapunov::{lyapunov_moments, LyapunovOptions, MomentField};
pub use report::{clt_report, CheckResult, CltSettings, VarianceTarget, Verdict};
pub use sample::{estimate_z, z_values, FluctuationSample, ZOptions};
