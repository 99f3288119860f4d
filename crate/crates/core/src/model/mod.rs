//! Model description: states, test functions, rates, offspring laws and the
//! pointwise operators built from them.

pub mod age_fn;
pub mod builtin;
pub mod initial;
pub mod offspring;
pub mod population;
pub mod rates;
pub mod state;
pub mod test_fn;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use age_fn::AgeFn;
pub use initial::{InitialBand, InitialCondition};
pub use offspring::{OffspringLaw, Outcome, OutcomeTable};
pub use population::{Individual, Population};
pub use rates::{Dependence, RateFn};
pub use state::{CoupleState, State, COUPLE, FEMALE, MALE};
pub use test_fn::{CoupleTerm, Functional, PairTestFunction, Term, TestFunction, TypeSel};

use crate::error::{Error, Result};

/// Declared uniform bounds. Missing entries make the matching condition
/// unverifiable; the simulator then falls back to analytic sup bounds.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bounds {
    pub b_max: Option<f64>,
    pub h_max: Option<f64>,
    pub g_max: Option<f64>,
    pub rho_max: Option<f64>,
    pub m_max: Option<f64>,
    pub gamma_max: Option<f64>,
    pub xi_max: Option<u32>,
}

/// Law of the number of immigrants arriving together.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BatchLaw {
    Deterministic { size: u32 },
    Poisson { mean: f64, cap: u32 },
}

/// One component of the arrival kernel: type `kind`, age uniform on
/// `[age_lo, age_hi]`, chosen with probability proportional to `weight`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelBand {
    pub kind: usize,
    pub age_lo: f64,
    pub age_hi: f64,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Immigration {
    /// Arrival rate per unit time, not scaled with K.
    pub rate: f64,
    #[serde(default)]
    pub dependence: Dependence,
    pub batch: BatchLaw,
    pub kernel: Vec<KernelBand>,
}

impl Immigration {
    pub fn arrival_rate(&self, phi: &[f64]) -> f64 {
        self.rate * self.dependence.factor(phi)
    }

    fn batch_table(&self) -> Result<OutcomeTable> {
        match &self.batch {
            BatchLaw::Deterministic { size } => {
                OffspringLaw::Deterministic { counts: vec![*size] }.compile(1)
            }
            BatchLaw::Poisson { mean, cap } => OffspringLaw::Poisson {
                means: vec![*mean],
                cap: *cap,
            }
            .compile(1),
        }
    }

    /// `(m~, v~)`: first and second moment of the batch size.
    pub fn batch_moments(&self) -> Result<(f64, f64)> {
        let t = self.batch_table()?;
        Ok((t.mean()[0], t.gamma(0, 0)))
    }

    fn total_weight(&self) -> f64 {
        self.kernel.iter().map(|b| b.weight).sum()
    }

    /// Draws one immigrant state.
    pub fn sample_state<R: Rng + ?Sized>(&self, rng: &mut R) -> State {
        let total = self.total_weight();
        let mut u = rng.random::<f64>() * total;
        let mut band = &self.kernel[self.kernel.len() - 1];
        for b in &self.kernel {
            if u < b.weight {
                band = b;
                break;
            }
            u -= b.weight;
        }
        let age = band.age_lo + (band.age_hi - band.age_lo) * rng.random::<f64>();
        State::new(band.kind, age)
    }

    /// `int f dK~`, by composite Gauss-Legendre on each band.
    pub fn kernel_integral(&self, f: impl Fn(usize, f64) -> f64) -> f64 {
        let total = self.total_weight();
        self.kernel
            .iter()
            .map(|b| {
                let mean = if b.age_hi > b.age_lo {
                    gauss_legendre_mean(|v| f(b.kind, v), b.age_lo, b.age_hi, 64)
                } else {
                    f(b.kind, b.age_lo)
                };
                b.weight / total * mean
            })
            .sum()
    }

    pub fn max_age(&self) -> f64 {
        self.kernel.iter().map(|b| b.age_hi).fold(0.0, f64::max)
    }
}

/// Mean of `f` over `[lo, hi]` using `panels` two-point Gauss-Legendre panels.
pub(crate) fn gauss_legendre_mean(f: impl Fn(f64) -> f64, lo: f64, hi: f64, panels: usize) -> f64 {
    let h = (hi - lo) / panels as f64;
    let r = 0.5 / 3f64.sqrt();
    let mut s = 0.0;
    for p in 0..panels {
        let mid = lo + (p as f64 + 0.5) * h;
        s += f(mid - r * h) + f(mid + r * h);
    }
    s / (2.0 * panels as f64)
}

/// Serializable model description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub n_types: usize,
    pub birth: RateFn,
    pub death: RateFn,
    /// Offspring law at bearing, per parent type.
    pub bearing: Vec<OffspringLaw>,
    /// Offspring law at death (splitting), per parent type.
    #[serde(default)]
    pub splitting: Vec<OffspringLaw>,
    /// Dependence functionals `g_j`; `phi_j = (g_j, S) / K`.
    #[serde(default)]
    pub functionals: Vec<TestFunction>,
    #[serde(default)]
    pub immigration: Option<Immigration>,
    #[serde(default)]
    pub bounds: Bounds,
    /// Declared range `[0, phi_max_j]` of the functionals, used by probes.
    #[serde(default)]
    pub phi_max: Option<Vec<f64>>,
}

/// A validated model with compiled offspring tables.
#[derive(Clone, Debug)]
pub struct RateModel {
    pub spec: ModelSpec,
    bearing: Vec<OutcomeTable>,
    splitting: Vec<OutcomeTable>,
    phi_age_free: Option<Vec<Vec<f64>>>,
}

impl RateModel {
    pub fn new(spec: ModelSpec) -> Result<Self> {
        let k = spec.n_types;
        if k == 0 {
            return Err(Error::contract("model needs at least one type"));
        }
        if spec.birth.profiles.len() != k || spec.death.profiles.len() != k {
            return Err(Error::contract(format!(
                "rate profiles must be given for each of the {k} types"
            )));
        }
        if spec.bearing.len() != k {
            return Err(Error::contract(format!(
                "bearing law must be given for each of the {k} types"
            )));
        }
        if !spec.splitting.is_empty() && spec.splitting.len() != k {
            return Err(Error::contract(format!(
                "splitting law must be empty or given for each of the {k} types"
            )));
        }
        let d = spec.functionals.len();
        for dep in [&spec.birth.dependence, &spec.death.dependence]
            .into_iter()
            .chain(spec.immigration.as_ref().map(|im| &im.dependence))
        {
            if let Some(j) = dep.max_functional() {
                if j >= d {
                    return Err(Error::contract(format!(
                        "dependence refers to functional {j} but only {d} are declared"
                    )));
                }
            }
        }
        if let Some(im) = &spec.immigration {
            if im.kernel.is_empty() || im.kernel.iter().any(|b| b.kind >= k || b.weight < 0.0) {
                return Err(Error::contract("immigration kernel has invalid bands"));
            }
            if im.kernel.iter().any(|b| b.age_lo < 0.0 || b.age_hi < b.age_lo) {
                return Err(Error::contract("immigration kernel ages must satisfy 0 <= lo <= hi"));
            }
        }
        let bearing = spec
            .bearing
            .iter()
            .map(|l| l.compile(k))
            .collect::<Result<Vec<_>>>()?;
        let splitting = if spec.splitting.is_empty() {
            vec![OffspringLaw::None.compile(k)?; k]
        } else {
            spec.splitting
                .iter()
                .map(|l| l.compile(k))
                .collect::<Result<Vec<_>>>()?
        };
        let phi_age_free = spec
            .functionals
            .iter()
            .map(|g| g.type_weights(k))
            .collect::<Option<Vec<_>>>();
        Ok(RateModel {
            spec,
            bearing,
            splitting,
            phi_age_free,
        })
    }

    pub fn n_types(&self) -> usize {
        self.spec.n_types
    }

    pub fn n_functionals(&self) -> usize {
        self.spec.functionals.len()
    }

    pub fn bearing(&self, kind: usize) -> &OutcomeTable {
        &self.bearing[kind]
    }

    pub fn splitting(&self, kind: usize) -> &OutcomeTable {
        &self.splitting[kind]
    }

    pub fn has_splitting(&self, kind: usize) -> bool {
        !self.splitting[kind].is_trivial()
    }

    pub fn immigration(&self) -> Option<&Immigration> {
        self.spec.immigration.as_ref()
    }

    /// Per-type weights of the functionals when none depends on age, so that
    /// `phi` can be tracked from type counts alone.
    pub fn age_free_functionals(&self) -> Option<&[Vec<f64>]> {
        self.phi_age_free.as_deref()
    }

    /// True when every rate and functional ignores age.
    pub fn is_age_free(&self) -> bool {
        self.spec.birth.is_age_free() && self.spec.death.is_age_free() && self.phi_age_free.is_some()
    }

    #[inline]
    pub fn birth_rate(&self, kind: usize, age: f64, phi: &[f64]) -> f64 {
        self.spec.birth.value(kind, age, phi)
    }

    #[inline]
    pub fn death_rate(&self, kind: usize, age: f64, phi: &[f64]) -> f64 {
        self.spec.death.value(kind, age, phi)
    }

    /// `n^i(s) = b m^i_bearing + h m^i_splitting`.
    pub fn n(&self, i: usize, s: State, phi: &[f64]) -> f64 {
        let b = self.birth_rate(s.kind, s.age, phi);
        let h = self.death_rate(s.kind, s.age, phi);
        b * self.bearing[s.kind].mean()[i] + h * self.splitting[s.kind].mean()[i]
    }

    /// `w^{i1 i2}(s) = b gamma_bearing + h gamma_splitting`.
    pub fn w(&self, i1: usize, i2: usize, s: State, phi: &[f64]) -> f64 {
        let b = self.birth_rate(s.kind, s.age, phi);
        let h = self.death_rate(s.kind, s.age, phi);
        b * self.bearing[s.kind].gamma(i1, i2) + h * self.splitting[s.kind].gamma(i1, i2)
    }

    /// `phi_j = (g_j, S) / K`.
    pub fn functionals(&self, pop: &Population, k: f64) -> Vec<f64> {
        self.spec
            .functionals
            .iter()
            .map(|g| pop.pair(g) / k)
            .collect()
    }

    /// Values `f(i, 0)` for every type.
    pub fn newborn_values(&self, f: &TestFunction) -> Vec<f64> {
        (0..self.n_types()).map(|i| f.eval(i, 0.0)).collect()
    }

    /// `L f(s) = f'(s) - h f(s) + sum_i f(i, 0) n^i(s)`.
    pub fn generator_apply(&self, f: &TestFunction, s: State, phi: &[f64]) -> Result<f64> {
        if !f.is_c1() {
            return Err(Error::contract(format!(
                "generator needs a C1 test function; '{}' is not differentiable",
                f.name
            )));
        }
        let f0 = self.newborn_values(f);
        Ok(self.generator_with(f, &f0, s, phi))
    }

    /// [`RateModel::generator_apply`] with precomputed newborn values; no C1 check.
    pub fn generator_with(&self, f: &TestFunction, f0: &[f64], s: State, phi: &[f64]) -> f64 {
        let (fv, df) = f.eval_with_derivative(s.kind, s.age);
        let b = self.birth_rate(s.kind, s.age, phi);
        let h = self.death_rate(s.kind, s.age, phi);
        df - h * fv
            + b * self.bearing[s.kind].mean_dot(f0)
            + h * self.splitting[s.kind].mean_dot(f0)
    }

    /// `Pi f(s) = sum f(i1,0) f(i2,0) w^{i1 i2} + h f^2 - 2 sum_i f(i,0) h m_split^i f`.
    pub fn qv_integrand(&self, f: &TestFunction, s: State, phi: &[f64]) -> f64 {
        let f0 = self.newborn_values(f);
        self.qv_with(f, &f0, s, phi)
    }

    pub fn qv_with(&self, f: &TestFunction, f0: &[f64], s: State, phi: &[f64]) -> f64 {
        let fv = f.eval(s.kind, s.age);
        let b = self.birth_rate(s.kind, s.age, phi);
        let h = self.death_rate(s.kind, s.age, phi);
        let split = &self.splitting[s.kind];
        b * self.bearing[s.kind].gamma_form(f0) + h * split.gamma_form(f0) + h * fv * fv
            - 2.0 * split.mean_dot(f0) * h * fv
    }

    /// Adds `d h(s; phi) / d phi` into `out`.
    pub fn death_gradient(&self, s: State, phi: &[f64], out: &mut [f64]) -> Result<()> {
        if self.spec.death.add_gradient(s.kind, s.age, phi, 1.0, out) {
            Ok(())
        } else {
            Err(Error::FeatureUnavailable(
                "death-rate dependence declares no derivatives".into(),
            ))
        }
    }

    /// Adds `d n^i(s; phi) / d phi` into `out`. Offspring laws do not depend on
    /// `phi`, so only the rates contribute.
    pub fn n_gradient(&self, i: usize, s: State, phi: &[f64], out: &mut [f64]) -> Result<()> {
        let mb = self.bearing[s.kind].mean()[i];
        let mh = self.splitting[s.kind].mean()[i];
        let ok = (mb == 0.0 || self.spec.birth.add_gradient(s.kind, s.age, phi, mb, out))
            && (mh == 0.0 || self.spec.death.add_gradient(s.kind, s.age, phi, mh, out));
        if ok {
            Ok(())
        } else {
            Err(Error::FeatureUnavailable(
                "rate dependence declares no derivatives".into(),
            ))
        }
    }

    pub fn has_derivatives(&self) -> bool {
        self.spec.birth.has_derivatives() && self.spec.death.has_derivatives()
    }

    /// Thinning bound for the birth rate: declared, else analytic.
    pub fn b_bound(&self, omega: f64) -> Result<f64> {
        self.spec
            .bounds
            .b_max
            .or_else(|| self.spec.birth.sup(omega, self.spec.phi_max.as_deref()))
            .ok_or_else(|| Error::contract("no usable bound for the birth rate; declare b_max"))
    }

    pub fn h_bound(&self, omega: f64) -> Result<f64> {
        self.spec
            .bounds
            .h_max
            .or_else(|| self.spec.death.sup(omega, self.spec.phi_max.as_deref()))
            .ok_or_else(|| Error::contract("no usable bound for the death rate; declare h_max"))
    }

    pub fn g_bound(&self) -> Result<f64> {
        match &self.spec.immigration {
            None => Ok(0.0),
            Some(im) => self
                .spec
                .bounds
                .g_max
                .or_else(|| {
                    im.dependence
                        .sup(self.spec.phi_max.as_deref())
                        .map(|s| s * im.rate)
                })
                .ok_or_else(|| {
                    Error::contract("no usable bound for the immigration rate; declare g_max")
                }),
        }
    }

    /// Largest number of offspring of one type at a single event.
    pub fn max_offspring(&self) -> u32 {
        self.bearing
            .iter()
            .chain(&self.splitting)
            .map(OutcomeTable::max_count)
            .max()
            .unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear_bd(b: f64, h: f64) -> RateModel {
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

    #[test]
    fn generator_of_constant_is_net_growth() {
        let m = linear_bd(0.5, 0.3);
        let lf = m
            .generator_apply(&TestFunction::total(), State::new(0, 1.7), &[])
            .unwrap();
        assert!((lf - 0.2).abs() < 1e-15);
    }

    #[test]
    fn pure_aging_generator() {
        let m = linear_bd(0.0, 0.0);
        let lf = m
            .generator_apply(&TestFunction::age(), State::new(0, 3.0), &[])
            .unwrap();
        assert_eq!(lf, 1.0);
    }

    #[test]
    fn branching_variance_classic() {
        let m = linear_bd(0.5, 0.3);
        let pi = m.qv_integrand(&TestFunction::total(), State::new(0, 0.4), &[]);
        assert!((pi - 0.8).abs() < 1e-15);
    }

    #[test]
    fn non_c1_test_function_rejected() {
        let m = linear_bd(0.5, 0.3);
        let f = TestFunction::single("band", TypeSel::All, AgeFn::Band { lo: 0.0, hi: 1.0 });
        assert!(matches!(
            m.generator_apply(&f, State::new(0, 0.5), &[]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn immigration_kernel_integral() {
        let im = Immigration {
            rate: 2.0,
            dependence: Dependence::None,
            batch: BatchLaw::Deterministic { size: 2 },
            kernel: vec![
                KernelBand {
                    kind: 0,
                    age_lo: 0.0,
                    age_hi: 2.0,
                    weight: 1.0,
                },
                KernelBand {
                    kind: 1,
                    age_lo: 1.0,
                    age_hi: 1.0,
                    weight: 3.0,
                },
            ],
        };
        // f(i, v) = v: band 0 mean 1, band 1 point 1.
        let i = im.kernel_integral(|_, v| v);
        assert!((i - 1.0).abs() < 1e-12);
        // f(i, v) = v^2 on band 0: mean 4/3.
        let i2 = im.kernel_integral(|k, v| if k == 0 { v * v } else { 0.0 });
        assert!((i2 - 0.25 * 4.0 / 3.0).abs() < 1e-12);
        assert_eq!(im.batch_moments().unwrap(), (2.0, 4.0));
    }
}
