use serde::{Deserialize, Serialize};

use super::age_fn::AgeFn;
use super::state::{CoupleState, State};

/// Which types a term of a test function applies to, and with what weight.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TypeSel {
    All,
    Only(usize),
    Weights(Vec<f64>),
}

impl TypeSel {
    #[inline]
    pub fn weight(&self, kind: usize) -> f64 {
        match self {
            TypeSel::All => 1.0,
            TypeSel::Only(k) => {
                if *k == kind {
                    1.0
                } else {
                    0.0
                }
            }
            TypeSel::Weights(w) => w.get(kind).copied().unwrap_or(0.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Term {
    pub types: TypeSel,
    pub age: AgeFn,
}

/// Test function on the single-age state space: `f(i, v) = sum_t w_t(i) g_t(v)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestFunction {
    pub name: String,
    pub terms: Vec<Term>,
}

impl TestFunction {
    pub fn new(name: impl Into<String>, terms: Vec<Term>) -> Self {
        TestFunction {
            name: name.into(),
            terms,
        }
    }

    pub fn single(name: impl Into<String>, types: TypeSel, age: AgeFn) -> Self {
        TestFunction::new(name, vec![Term { types, age }])
    }

    pub fn constant(value: f64) -> Self {
        let name = if value == 1.0 {
            "total".to_string()
        } else {
            format!("const{value}")
        };
        TestFunction::single(name, TypeSel::All, AgeFn::constant(value))
    }

    pub fn total() -> Self {
        TestFunction::constant(1.0)
    }

    pub fn indicator(kind: usize) -> Self {
        TestFunction::single(format!("count{kind}"), TypeSel::Only(kind), AgeFn::one())
    }

    /// `f(i, v) = v`: the age sum.
    pub fn age() -> Self {
        TestFunction::single("age_sum", TypeSel::All, AgeFn::linear(0.0, 1.0))
    }

    pub fn window(lo: f64, hi: f64, ramp: f64) -> Self {
        TestFunction::single(
            format!("window{lo}_{hi}"),
            TypeSel::All,
            AgeFn::window(lo, hi, ramp),
        )
    }

    #[inline]
    pub fn eval(&self, kind: usize, age: f64) -> f64 {
        self.terms
            .iter()
            .map(|t| {
                let w = t.types.weight(kind);
                if w == 0.0 {
                    0.0
                } else {
                    w * t.age.value(age)
                }
            })
            .sum()
    }

    #[inline]
    pub fn eval_state(&self, s: &State) -> f64 {
        self.eval(s.kind, s.age)
    }

    /// Value and age derivative.
    #[inline]
    pub fn eval_with_derivative(&self, kind: usize, age: f64) -> (f64, f64) {
        self.terms.iter().fold((0.0, 0.0), |(v, d), t| {
            let w = t.types.weight(kind);
            if w == 0.0 {
                (v, d)
            } else {
                let (tv, td) = t.age.value_and_derivative(age);
                (v + w * tv, d + w * td)
            }
        })
    }

    pub fn is_c1(&self) -> bool {
        self.terms.iter().all(|t| t.age.is_c1())
    }

    /// If the function ignores age, its per-type values for `n_types` types.
    pub fn type_weights(&self, n_types: usize) -> Option<Vec<f64>> {
        if !self.terms.iter().all(|t| t.age.is_constant()) {
            return None;
        }
        Some((0..n_types).map(|k| self.eval(k, 0.0)).collect())
    }

    /// Upper bound of `|f|` over types `0..n_types` and ages `[0, omega]`.
    pub fn sup_abs(&self, omega: f64) -> f64 {
        self.terms.iter().map(|t| t.age.sup_abs(0.0, omega)).sum()
    }
}

/// One separable piece `coef * g(v) * k(w)` of a couple test function.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoupleTerm {
    pub coef: f64,
    pub female: AgeFn,
    pub male: AgeFn,
}

/// Test function for the serial-monogamy state space.
///
/// `f(F, v, ABSENT) = female(v)`, `f(M, ABSENT, w) = male(w)` and
/// `f(FM, v, w) = sum coef * g(v) * k(w)`. Singles never see the absent slot,
/// so `d_w f(F, .) = d_v f(M, .) = 0` holds by construction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairTestFunction {
    pub name: String,
    pub female: AgeFn,
    pub male: AgeFn,
    pub couple: Vec<CoupleTerm>,
}

impl PairTestFunction {
    pub fn new(
        name: impl Into<String>,
        female: AgeFn,
        male: AgeFn,
        couple: Vec<CoupleTerm>,
    ) -> Self {
        PairTestFunction {
            name: name.into(),
            female,
            male,
            couple,
        }
    }

    /// Couple value equals the sum of the partners' single values; marriage
    /// and separation leave `(f, S)` unchanged.
    pub fn marriage_neutral(name: impl Into<String>, female: AgeFn, male: AgeFn) -> Self {
        let couple = vec![
            CoupleTerm {
                coef: 1.0,
                female: female.clone(),
                male: AgeFn::one(),
            },
            CoupleTerm {
                coef: 1.0,
                female: AgeFn::one(),
                male: male.clone(),
            },
        ];
        PairTestFunction::new(name, female, male, couple)
    }

    /// `X = 1_F + 1_M + 2 * 1_FM`, the head count.
    pub fn head_count() -> Self {
        PairTestFunction::marriage_neutral("head_count", AgeFn::one(), AgeFn::one())
    }

    pub fn couple_count() -> Self {
        PairTestFunction::new(
            "couples",
            AgeFn::constant(0.0),
            AgeFn::constant(0.0),
            vec![CoupleTerm {
                coef: 1.0,
                female: AgeFn::one(),
                male: AgeFn::one(),
            }],
        )
    }

    pub fn single_females() -> Self {
        PairTestFunction::new("single_females", AgeFn::one(), AgeFn::constant(0.0), vec![])
    }

    pub fn single_males() -> Self {
        PairTestFunction::new("single_males", AgeFn::constant(0.0), AgeFn::one(), vec![])
    }

    /// Number of individuals (couples counted once).
    pub fn units() -> Self {
        PairTestFunction::new(
            "units",
            AgeFn::one(),
            AgeFn::one(),
            vec![CoupleTerm {
                coef: 1.0,
                female: AgeFn::one(),
                male: AgeFn::one(),
            }],
        )
    }

    #[inline]
    pub fn female_value(&self, v: f64) -> f64 {
        self.female.value(v)
    }

    #[inline]
    pub fn male_value(&self, w: f64) -> f64 {
        self.male.value(w)
    }

    #[inline]
    pub fn couple_value(&self, v: f64, w: f64) -> f64 {
        self.couple
            .iter()
            .map(|t| t.coef * t.female.value(v) * t.male.value(w))
            .sum()
    }

    pub fn eval(&self, s: &CoupleState) -> f64 {
        match *s {
            CoupleState::Female { v } => self.female_value(v),
            CoupleState::Male { w } => self.male_value(w),
            CoupleState::Couple { v, w } => self.couple_value(v, w),
        }
    }

    /// `(d_v f, d_w f)` at a state; the absent slot contributes zero.
    pub fn gradient(&self, s: &CoupleState) -> (f64, f64) {
        match *s {
            CoupleState::Female { v } => (self.female.derivative(v), 0.0),
            CoupleState::Male { w } => (0.0, self.male.derivative(w)),
            CoupleState::Couple { v, w } => self.couple.iter().fold((0.0, 0.0), |(dv, dw), t| {
                let (g, dg) = t.female.value_and_derivative(v);
                let (k, dk) = t.male.value_and_derivative(w);
                (dv + t.coef * dg * k, dw + t.coef * g * dk)
            }),
        }
    }

    pub fn is_c1(&self) -> bool {
        self.female.is_c1()
            && self.male.is_c1()
            && self.couple.iter().all(|t| t.female.is_c1() && t.male.is_c1())
    }

    /// Per-shape constants if the function ignores ages: `(F, M, FM)`.
    pub fn shape_weights(&self) -> Option<[f64; 3]> {
        let constant = self.female.is_constant()
            && self.male.is_constant()
            && self
                .couple
                .iter()
                .all(|t| t.female.is_constant() && t.male.is_constant());
        constant.then(|| {
            [
                self.female_value(0.0),
                self.male_value(0.0),
                self.couple_value(0.0, 0.0),
            ]
        })
    }
}

/// A test function of either arity, for configuration-driven evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Functional {
    Single(TestFunction),
    Couple(PairTestFunction),
}

impl Functional {
    pub fn name(&self) -> &str {
        match self {
            Functional::Single(f) => &f.name,
            Functional::Couple(f) => &f.name,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn type_selection_weights() {
        let f = TestFunction::new(
            "mix",
            vec![
                Term {
                    types: TypeSel::Only(1),
                    age: AgeFn::constant(2.0),
                },
                Term {
                    types: TypeSel::Weights(vec![0.5, 0.25]),
                    age: AgeFn::linear(0.0, 1.0),
                },
            ],
        );
        assert_eq!(f.eval(0, 2.0), 1.0);
        assert_eq!(f.eval(1, 2.0), 2.5);
        assert_eq!(f.eval(2, 2.0), 0.0);
        assert_eq!(f.eval_with_derivative(1, 3.0), (2.75, 0.25));
    }

    #[test]
    fn type_weights_only_for_age_free_functions() {
        assert_eq!(TestFunction::indicator(1).type_weights(3), Some(vec![0.0, 1.0, 0.0]));
        assert_eq!(TestFunction::age().type_weights(2), None);
    }

    #[test]
    fn monogamy_structural_constraint() {
        let f = PairTestFunction::new(
            "probe",
            AgeFn::linear(1.0, 0.5),
            AgeFn::window(0.5, 2.0, 0.5),
            vec![CoupleTerm {
                coef: 2.0,
                female: AgeFn::linear(0.0, 1.0),
                male: AgeFn::Exponential { rate: 0.1 },
            }],
        );
        // d_w f(F, v, ABSENT) = 0 and d_v f(M, ABSENT, w) = 0.
        assert_eq!(f.gradient(&CoupleState::Female { v: 1.3 }).1, 0.0);
        assert_eq!(f.gradient(&CoupleState::Male { w: 0.9 }).0, 0.0);
        let (dv, dw) = f.gradient(&CoupleState::Couple { v: 1.5, w: 2.0 });
        let h = 1e-6;
        let fd_v = (f.couple_value(1.5 + h, 2.0) - f.couple_value(1.5 - h, 2.0)) / (2.0 * h);
        let fd_w = (f.couple_value(1.5, 2.0 + h) - f.couple_value(1.5, 2.0 - h)) / (2.0 * h);
        assert!((dv - fd_v).abs() < 1e-6 * dv.abs().max(1.0));
        assert!((dw - fd_w).abs() < 1e-6 * dw.abs().max(1.0));
    }

    #[test]
    fn head_count_shape_weights() {
        assert_eq!(PairTestFunction::head_count().shape_weights(), Some([1.0, 1.0, 2.0]));
        assert_eq!(PairTestFunction::couple_count().shape_weights(), Some([0.0, 0.0, 1.0]));
    }
}
