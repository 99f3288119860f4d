//! Serial monogamy: singles of both sexes and couples, with marriage,
//! separation and widowing. Event simulation, the coupled density limit,
//! head-count accounting and fluctuation checks.

pub mod check;
pub mod model;
pub mod pde;
pub mod population;
pub mod sim;

pub use check::{monogamy_fluct_check, qv_rate, MonogamyCheckOptions};
pub use model::{MonogamyBounds, MonogamyLogistic, MonogamyModel, MonogamySpec, PairProfile};
pub use pde::{solve_limit_monogamy, solve_limit_monogamy_observed, MonogamyLimit, TwoSexDensity};
pub use population::{Couple, CoupleBand, CouplePopulation, MonogamyInitial, Person, SingleBand};
pub use sim::{
    accounting_series, apply_monogamy_event, expected_delta, simulate_monogamy, simulate_monogamy_with_rng,
    Accounting, MonogamyOptions, MonogamyTrajectory,
};
