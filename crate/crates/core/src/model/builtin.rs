//! Named model families.

use serde::{Deserialize, Serialize};

use super::age_fn::AgeFn;
use super::offspring::OffspringLaw;
use super::rates::{Dependence, RateFn};
use super::test_fn::TestFunction;
use super::{Bounds, Immigration, ModelSpec};

/// Single-type linear birth-death: constant `b` and `h`, one newborn per
/// bearing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BirthDeath {
    pub birth: f64,
    pub death: f64,
    #[serde(default)]
    pub immigration: Option<Immigration>,
}

impl BirthDeath {
    pub fn spec(&self) -> ModelSpec {
        ModelSpec {
            n_types: 1,
            birth: RateFn::constant(1, self.birth),
            death: RateFn::constant(1, self.death),
            bearing: vec![OffspringLaw::Deterministic { counts: vec![1] }],
            splitting: vec![],
            functionals: vec![],
            immigration: self.immigration.clone(),
            bounds: Bounds {
                b_max: Some(self.birth),
                h_max: Some(self.death),
                g_max: self.immigration.as_ref().map(|im| im.rate),
                ..Bounds::default()
            },
            phi_max: None,
        }
    }
}

/// Two-sex model with logistic female fertility: females of age `v` bear one
/// child, female with probability `female_prob`, at rate
/// `beta window(v) max(0, 1 - (1, S) / capacity)`; both sexes die at rate
/// `death0 + death1 v`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TwoSexLogistic {
    pub beta: f64,
    pub fertile_from: f64,
    pub fertile_to: f64,
    pub ramp: f64,
    pub capacity: f64,
    pub death0: f64,
    pub death1: f64,
    pub female_prob: f64,
    /// Age bound used for the declared `h_max`.
    pub max_age: f64,
}

impl Default for TwoSexLogistic {
    fn default() -> Self {
        TwoSexLogistic {
            beta: 2.0,
            fertile_from: 0.5,
            fertile_to: 2.5,
            ramp: 0.5,
            capacity: 3.0,
            death0: 0.2,
            death1: 0.1,
            female_prob: 0.5,
            max_age: 10.0,
        }
    }
}

impl TwoSexLogistic {
    pub fn spec(&self) -> ModelSpec {
        let h = AgeFn::linear(self.death0, self.death1);
        ModelSpec {
            n_types: 2,
            birth: RateFn::new(
                vec![
                    AgeFn::Product {
                        factors: vec![
                            AgeFn::constant(self.beta),
                            AgeFn::window(self.fertile_from, self.fertile_to, self.ramp),
                        ],
                    },
                    AgeFn::constant(0.0),
                ],
                Dependence::Logistic {
                    functional: 0,
                    capacity: self.capacity,
                },
            ),
            death: RateFn::new(vec![h.clone(), h], Dependence::None),
            bearing: vec![
                OffspringLaw::Litter {
                    sizes: vec![0.0, 1.0],
                    type_probs: vec![self.female_prob, 1.0 - self.female_prob],
                },
                OffspringLaw::None,
            ],
            splitting: vec![],
            functionals: vec![TestFunction::total()],
            immigration: None,
            bounds: Bounds {
                b_max: Some(self.beta),
                h_max: Some(self.death0 + self.death1 * self.max_age),
                ..Bounds::default()
            },
            phi_max: Some(vec![self.capacity]),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{RateModel, State};

    #[test]
    fn two_sex_rates() {
        let m = RateModel::new(TwoSexLogistic::default().spec()).unwrap();
        assert_eq!(m.birth_rate(0, 1.5, &[1.5]), 1.0);
        assert_eq!(m.birth_rate(1, 1.5, &[1.5]), 0.0);
        assert_eq!(m.death_rate(1, 2.0, &[0.0]), 0.4);
        // n^M(F, v) = b(v) / 2
        assert_eq!(m.n(1, State::new(0, 1.5), &[0.0]), 1.0);
    }

    #[test]
    fn male_indicator_generator_symbolic() {
        let m = RateModel::new(TwoSexLogistic::default().spec()).unwrap();
        let f = TestFunction::indicator(1);
        let phi = [1.2];
        for v in [0.3, 1.0, 2.4, 4.0] {
            let lf = m.generator_apply(&f, State::new(0, v), &phi).unwrap();
            let b = 2.0 * AgeFn::window(0.5, 2.5, 0.5).value(v) * (1.0 - 1.2 / 3.0);
            assert!((lf - 0.5 * b).abs() < 1e-14);
            let lm = m.generator_apply(&f, State::new(1, v), &phi).unwrap();
            assert!((lm + (0.2 + 0.1 * v)).abs() < 1e-14);
        }
    }
}
