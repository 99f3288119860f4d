use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AgeFn, CoupleState, Dependence, OffspringLaw, OutcomeTable, PairTestFunction};

/// Separable two-age profile `scale * female(v) * male(w)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairProfile {
    pub scale: f64,
    #[serde(default = "AgeFn::one")]
    pub female: AgeFn,
    #[serde(default = "AgeFn::one")]
    pub male: AgeFn,
}

impl PairProfile {
    pub fn constant(scale: f64) -> Self {
        PairProfile {
            scale,
            female: AgeFn::one(),
            male: AgeFn::one(),
        }
    }

    pub fn zero() -> Self {
        PairProfile::constant(0.0)
    }

    #[inline]
    pub fn value(&self, v: f64, w: f64) -> f64 {
        if self.scale == 0.0 {
            return 0.0;
        }
        self.scale * self.female.value(v) * self.male.value(w)
    }

    pub fn is_zero(&self) -> bool {
        self.scale == 0.0
    }

    fn sup(&self, omega: f64) -> f64 {
        self.scale.abs() * self.female.sup_abs(0.0, omega) * self.male.sup_abs(0.0, omega)
    }
}

/// Declared uniform bounds for the thinning slices.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonogamyBounds {
    pub b_max: Option<f64>,
    pub h_max: Option<f64>,
    pub rho_max: Option<f64>,
}

/// Serial-monogamy demography. Offspring laws are over `(F, M)` counts.
/// The marriage rate `rho` is the K-free limit; each female-male pair marries
/// at rate `rho / K`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonogamySpec {
    /// `h^F(v, ABSENT)`
    pub female_death: AgeFn,
    /// `h^M(ABSENT, w)`
    pub male_death: AgeFn,
    /// `h^F(v, w)` of a married female.
    pub female_death_married: PairProfile,
    /// `h^M(v, w)` of a married male.
    pub male_death_married: PairProfile,
    /// `h^FM(v, w)`
    pub separation: PairProfile,
    /// `b(v, w)` of a couple.
    pub couple_birth: PairProfile,
    /// `b(v, ABSENT)` of a single female.
    pub single_birth: AgeFn,
    pub couple_litter: OffspringLaw,
    pub single_litter: OffspringLaw,
    /// `rho^infinity(v, w)`
    pub marriage: PairProfile,
    #[serde(default)]
    pub functionals: Vec<PairTestFunction>,
    #[serde(default)]
    pub birth_dependence: Dependence,
    #[serde(default)]
    pub death_dependence: Dependence,
    #[serde(default)]
    pub marriage_dependence: Dependence,
    #[serde(default)]
    pub bounds: MonogamyBounds,
}

impl MonogamySpec {
    /// Age-free model with the given constant rates and one child per birth,
    /// female with probability 1/2.
    pub fn constant(b_couple: f64, b_single: f64, h: f64, separation: f64, rho: f64) -> Self {
        let litter = OffspringLaw::Litter {
            sizes: vec![0.0, 1.0],
            type_probs: vec![0.5, 0.5],
        };
        MonogamySpec {
            female_death: AgeFn::constant(h),
            male_death: AgeFn::constant(h),
            female_death_married: PairProfile::constant(h),
            male_death_married: PairProfile::constant(h),
            separation: PairProfile::constant(separation),
            couple_birth: PairProfile::constant(b_couple),
            single_birth: AgeFn::constant(b_single),
            couple_litter: litter.clone(),
            single_litter: litter,
            marriage: PairProfile::constant(rho),
            functionals: vec![],
            birth_dependence: Dependence::None,
            death_dependence: Dependence::None,
            marriage_dependence: Dependence::None,
            bounds: MonogamyBounds::default(),
        }
    }
}

/// Age-structured serial monogamy with logistic fertility.
///
/// Both sexes die at `death0 + death1 * age` whether single or married,
/// couples separate at `separation`, couples bear at
/// `couple_beta * window(v)` and single females at `single_beta * window(v)`,
/// each times `max(0, 1 - X / capacity)`; one child per birth, female with
/// probability 1/2. Singles of marriageable ages marry at
/// `rho * window_m(v) * window_m(w)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonogamyLogistic {
    pub couple_beta: f64,
    pub single_beta: f64,
    pub fertile_from: f64,
    pub fertile_to: f64,
    pub capacity: f64,
    pub death0: f64,
    pub death1: f64,
    pub separation: f64,
    pub rho: f64,
    pub marriage_from: f64,
    pub marriage_to: f64,
    pub ramp: f64,
    /// Age bound used for the declared `h_max`.
    pub max_age: f64,
}

impl Default for MonogamyLogistic {
    fn default() -> Self {
        MonogamyLogistic {
            couple_beta: 1.5,
            single_beta: 0.3,
            fertile_from: 0.5,
            fertile_to: 3.0,
            capacity: 4.0,
            death0: 0.1,
            death1: 0.05,
            separation: 0.2,
            rho: 1.0,
            marriage_from: 0.3,
            marriage_to: 4.0,
            ramp: 0.3,
            max_age: 12.0,
        }
    }
}

impl MonogamyLogistic {
    pub fn spec(&self) -> MonogamySpec {
        let h = AgeFn::linear(self.death0, self.death1);
        let fertile = AgeFn::window(self.fertile_from, self.fertile_to, self.ramp);
        let marriageable = AgeFn::window(self.marriage_from, self.marriage_to, self.ramp);
        let litter = OffspringLaw::Litter {
            sizes: vec![0.0, 1.0],
            type_probs: vec![0.5, 0.5],
        };
        let h_max = self.death0 + self.death1 * self.max_age;
        MonogamySpec {
            female_death: h.clone(),
            male_death: h.clone(),
            female_death_married: PairProfile {
                scale: 1.0,
                female: h.clone(),
                male: AgeFn::one(),
            },
            male_death_married: PairProfile {
                scale: 1.0,
                female: AgeFn::one(),
                male: h,
            },
            separation: PairProfile::constant(self.separation),
            couple_birth: PairProfile {
                scale: self.couple_beta,
                female: fertile.clone(),
                male: AgeFn::one(),
            },
            single_birth: AgeFn::Product {
                factors: vec![AgeFn::constant(self.single_beta), fertile],
            },
            couple_litter: litter.clone(),
            single_litter: litter,
            marriage: PairProfile {
                scale: self.rho,
                female: marriageable.clone(),
                male: marriageable,
            },
            functionals: vec![PairTestFunction::head_count()],
            birth_dependence: Dependence::Logistic {
                functional: 0,
                capacity: self.capacity,
            },
            death_dependence: Dependence::None,
            marriage_dependence: Dependence::None,
            bounds: MonogamyBounds {
                b_max: Some(self.couple_beta.max(self.single_beta)),
                h_max: Some(h_max.max(self.separation)),
                rho_max: Some(self.rho),
            },
        }
    }
}

/// Validated monogamy model with compiled litter tables.
#[derive(Clone, Debug)]
pub struct MonogamyModel {
    pub spec: MonogamySpec,
    couple_litter: OutcomeTable,
    single_litter: OutcomeTable,
    shape_weights: Option<Vec<[f64; 3]>>,
}

impl MonogamyModel {
    pub fn new(spec: MonogamySpec) -> Result<Self> {
        let d = spec.functionals.len();
        for dep in [&spec.birth_dependence, &spec.death_dependence, &spec.marriage_dependence] {
            if let Some(j) = dep.max_functional() {
                if j >= d {
                    return Err(Error::contract(format!(
                        "dependence refers to functional {j} but only {d} are declared"
                    )));
                }
            }
        }
        let couple_litter = spec.couple_litter.compile(2)?;
        let single_litter = spec.single_litter.compile(2)?;
        let shape_weights = spec
            .functionals
            .iter()
            .map(PairTestFunction::shape_weights)
            .collect::<Option<Vec<_>>>();
        Ok(MonogamyModel {
            spec,
            couple_litter,
            single_litter,
            shape_weights,
        })
    }

    pub fn n_functionals(&self) -> usize {
        self.spec.functionals.len()
    }

    /// Per-shape weights when every functional ignores age.
    pub fn shape_weights(&self) -> Option<&[[f64; 3]]> {
        self.shape_weights.as_deref()
    }

    pub fn couple_litter(&self) -> &OutcomeTable {
        &self.couple_litter
    }

    pub fn single_litter(&self) -> &OutcomeTable {
        &self.single_litter
    }

    #[inline]
    pub fn female_death(&self, v: f64, phi: &[f64]) -> f64 {
        dep(&self.spec.death_dependence, self.spec.female_death.value(v), phi)
    }

    #[inline]
    pub fn male_death(&self, w: f64, phi: &[f64]) -> f64 {
        dep(&self.spec.death_dependence, self.spec.male_death.value(w), phi)
    }

    #[inline]
    pub fn female_death_married(&self, v: f64, w: f64, phi: &[f64]) -> f64 {
        dep(&self.spec.death_dependence, self.spec.female_death_married.value(v, w), phi)
    }

    #[inline]
    pub fn male_death_married(&self, v: f64, w: f64, phi: &[f64]) -> f64 {
        dep(&self.spec.death_dependence, self.spec.male_death_married.value(v, w), phi)
    }

    #[inline]
    pub fn separation(&self, v: f64, w: f64, phi: &[f64]) -> f64 {
        dep(&self.spec.death_dependence, self.spec.separation.value(v, w), phi)
    }

    #[inline]
    pub fn couple_birth(&self, v: f64, w: f64, phi: &[f64]) -> f64 {
        dep(&self.spec.birth_dependence, self.spec.couple_birth.value(v, w), phi)
    }

    #[inline]
    pub fn single_birth(&self, v: f64, phi: &[f64]) -> f64 {
        dep(&self.spec.birth_dependence, self.spec.single_birth.value(v), phi)
    }

    #[inline]
    pub fn marriage(&self, v: f64, w: f64, phi: &[f64]) -> f64 {
        dep(&self.spec.marriage_dependence, self.spec.marriage.value(v, w), phi)
    }

    /// `phi_j = (g_j, S) / K` for `(state, weight)` pairs.
    pub fn functionals_of<'a>(&self, states: impl Iterator<Item = (&'a CoupleState, f64)> + Clone) -> Vec<f64> {
        self.spec
            .functionals
            .iter()
            .map(|g| states.clone().map(|(s, w)| w * g.eval(s)).sum())
            .collect()
    }

    /// Thinning bounds `(b_max, h_max, rho_max)`, declared or analytic.
    pub fn bounds(&self, omega: f64) -> Result<(f64, f64, f64)> {
        let s = &self.spec;
        let sup_dep = |d: &Dependence| d.sup(None);
        let analytic = |base: f64, d: &Dependence| sup_dep(d).map(|f| base * f);
        let b = s.bounds.b_max.or_else(|| {
            analytic(
                s.couple_birth.sup(omega).max(s.single_birth.sup_abs(0.0, omega)),
                &s.birth_dependence,
            )
        });
        let h = s.bounds.h_max.or_else(|| {
            analytic(
                s.female_death
                    .sup_abs(0.0, omega)
                    .max(s.male_death.sup_abs(0.0, omega))
                    .max(s.female_death_married.sup(omega))
                    .max(s.male_death_married.sup(omega))
                    .max(s.separation.sup(omega)),
                &s.death_dependence,
            )
        });
        let rho = s
            .bounds
            .rho_max
            .or_else(|| analytic(s.marriage.sup(omega), &s.marriage_dependence));
        match (b, h, rho) {
            (Some(b), Some(h), Some(r)) => Ok((b, h, r)),
            _ => Err(Error::contract(
                "monogamy model needs b_max, h_max and rho_max (declared or derivable)",
            )),
        }
    }
}

#[inline]
fn dep(d: &Dependence, base: f64, phi: &[f64]) -> f64 {
    if base == 0.0 {
        0.0
    } else {
        base * d.factor(phi)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_model_rates() {
        let m = MonogamyModel::new(MonogamySpec::constant(1.0, 0.2, 0.1, 0.05, 2.0)).unwrap();
        assert_eq!(m.couple_birth(3.0, 4.0, &[]), 1.0);
        assert_eq!(m.single_birth(3.0, &[]), 0.2);
        assert_eq!(m.marriage(1.0, 2.0, &[]), 2.0);
        assert_eq!(m.bounds(10.0).unwrap(), (1.0, 0.1, 2.0));
        assert_eq!(m.couple_litter().mean(), &[0.5, 0.5]);
    }

    #[test]
    fn bad_functional_index_rejected() {
        let mut spec = MonogamySpec::constant(1.0, 0.0, 0.1, 0.0, 1.0);
        spec.marriage_dependence = Dependence::Logistic {
            functional: 0,
            capacity: 2.0,
        };
        assert!(MonogamyModel::new(spec).is_err());
    }
}
