use serde::{Deserialize, Serialize};

/// Scalar function of age. Building block for test functions and rate profiles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AgeFn {
    Constant {
        value: f64,
    },
    /// `sum_k coeffs[k] * v^k`
    Polynomial {
        coeffs: Vec<f64>,
    },
    /// C1 bump: 1 on `[lo, hi]` away from the edges, with cubic smoothstep
    /// ramps of width `ramp` centred on `lo` and on `hi`.
    Window {
        lo: f64,
        hi: f64,
        ramp: f64,
    },
    /// Sharp indicator of `[lo, hi)`. Not differentiable.
    Band {
        lo: f64,
        hi: f64,
    },
    /// `exp(rate * v)`
    Exponential {
        rate: f64,
    },
    Product {
        factors: Vec<AgeFn>,
    },
    Sum {
        terms: Vec<AgeFn>,
    },
}

fn smoothstep(x: f64) -> (f64, f64) {
    if x <= 0.0 {
        (0.0, 0.0)
    } else if x >= 1.0 {
        (1.0, 0.0)
    } else {
        (x * x * (3.0 - 2.0 * x), 6.0 * x * (1.0 - x))
    }
}

impl AgeFn {
    pub fn constant(value: f64) -> Self {
        AgeFn::Constant { value }
    }

    pub fn one() -> Self {
        AgeFn::constant(1.0)
    }

    pub fn linear(intercept: f64, slope: f64) -> Self {
        AgeFn::Polynomial {
            coeffs: vec![intercept, slope],
        }
    }

    pub fn window(lo: f64, hi: f64, ramp: f64) -> Self {
        AgeFn::Window { lo, hi, ramp }
    }

    pub fn value(&self, v: f64) -> f64 {
        self.value_and_derivative(v).0
    }

    pub fn derivative(&self, v: f64) -> f64 {
        self.value_and_derivative(v).1
    }

    pub fn value_and_derivative(&self, v: f64) -> (f64, f64) {
        match self {
            AgeFn::Constant { value } => (*value, 0.0),
            AgeFn::Polynomial { coeffs } => {
                // Horner on value and derivative together.
                let mut p = 0.0;
                let mut dp = 0.0;
                for &c in coeffs.iter().rev() {
                    dp = dp * v + p;
                    p = p * v + c;
                }
                (p, dp)
            }
            AgeFn::Window { lo, hi, ramp } => {
                if *ramp <= 0.0 {
                    let inside = v >= *lo && v < *hi;
                    return (if inside { 1.0 } else { 0.0 }, 0.0);
                }
                let (up, dup) = smoothstep((v - lo) / ramp + 0.5);
                let (down, ddown) = smoothstep((hi - v) / ramp + 0.5);
                (up * down, (dup * down - up * ddown) / ramp)
            }
            AgeFn::Band { lo, hi } => (if v >= *lo && v < *hi { 1.0 } else { 0.0 }, 0.0),
            AgeFn::Exponential { rate } => {
                let e = (rate * v).exp();
                (e, rate * e)
            }
            AgeFn::Product { factors } => {
                let mut p = 1.0;
                let mut dp = 0.0;
                for f in factors {
                    let (fv, fd) = f.value_and_derivative(v);
                    dp = dp * fv + p * fd;
                    p *= fv;
                }
                (p, dp)
            }
            AgeFn::Sum { terms } => terms.iter().fold((0.0, 0.0), |(a, da), t| {
                let (tv, td) = t.value_and_derivative(v);
                (a + tv, da + td)
            }),
        }
    }

    /// Whether the function has a continuous first derivative everywhere.
    pub fn is_c1(&self) -> bool {
        match self {
            AgeFn::Constant { .. } | AgeFn::Polynomial { .. } | AgeFn::Exponential { .. } => true,
            AgeFn::Window { ramp, .. } => *ramp > 0.0,
            AgeFn::Band { .. } => false,
            AgeFn::Product { factors } => factors.iter().all(AgeFn::is_c1),
            AgeFn::Sum { terms } => terms.iter().all(AgeFn::is_c1),
        }
    }

    pub fn is_constant(&self) -> bool {
        match self {
            AgeFn::Constant { .. } => true,
            AgeFn::Polynomial { coeffs } => coeffs.iter().skip(1).all(|&c| c == 0.0),
            AgeFn::Product { factors } => factors.iter().all(AgeFn::is_constant),
            AgeFn::Sum { terms } => terms.iter().all(AgeFn::is_constant),
            _ => false,
        }
    }

    /// Upper bound on `|f(v)|` for `v` in `[lo, hi]` (analytic, possibly loose).
    pub fn sup_abs(&self, lo: f64, hi: f64) -> f64 {
        match self {
            AgeFn::Constant { value } => value.abs(),
            AgeFn::Polynomial { coeffs } => {
                let r = lo.abs().max(hi.abs());
                coeffs
                    .iter()
                    .enumerate()
                    .map(|(k, c)| c.abs() * r.powi(k as i32))
                    .sum()
            }
            AgeFn::Window { .. } | AgeFn::Band { .. } => 1.0,
            AgeFn::Exponential { rate } => (rate * lo).exp().max((rate * hi).exp()),
            AgeFn::Product { factors } => factors.iter().map(|f| f.sup_abs(lo, hi)).product(),
            AgeFn::Sum { terms } => terms.iter().map(|f| f.sup_abs(lo, hi)).sum(),
        }
    }

    /// Short human-readable form, used in CSV headers.
    pub fn label(&self) -> String {
        match self {
            AgeFn::Constant { value } => format!("{value}"),
            AgeFn::Polynomial { coeffs } => {
                if coeffs.len() == 2 && coeffs[0] == 0.0 && coeffs[1] == 1.0 {
                    "v".to_string()
                } else {
                    format!("poly{coeffs:?}")
                }
            }
            AgeFn::Window { lo, hi, ramp } => format!("window[{lo},{hi};{ramp}]"),
            AgeFn::Band { lo, hi } => format!("band[{lo},{hi})"),
            AgeFn::Exponential { rate } => format!("exp({rate}v)"),
            AgeFn::Product { factors } => factors.iter().map(AgeFn::label).collect::<Vec<_>>().join("*"),
            AgeFn::Sum { terms } => terms.iter().map(AgeFn::label).collect::<Vec<_>>().join("+"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn central_difference(f: &AgeFn, v: f64) -> f64 {
        let h = 1e-6;
        (f.value(v + h) - f.value(v - h)) / (2.0 * h)
    }

    #[test]
    fn c1_families_match_finite_differences() {
        let families = [
            AgeFn::linear(0.3, -1.2),
            AgeFn::Polynomial {
                coeffs: vec![1.0, 0.5, -0.25, 0.125],
            },
            AgeFn::window(1.0, 2.0, 0.5),
            AgeFn::Exponential { rate: 0.7 },
            AgeFn::Product {
                factors: vec![AgeFn::window(0.5, 3.0, 1.0), AgeFn::linear(1.0, 2.0)],
            },
            AgeFn::Sum {
                terms: vec![AgeFn::Exponential { rate: -0.3 }, AgeFn::linear(0.0, 1.0)],
            },
        ];
        for f in &families {
            assert!(f.is_c1());
            for &v in &[0.1, 0.77, 0.9, 1.1, 1.6, 2.2, 2.9, 4.0] {
                let exact = f.derivative(v);
                let fd = central_difference(f, v);
                let scale = exact.abs().max(1.0);
                assert!(
                    (exact - fd).abs() / scale <= 1e-6,
                    "{f:?} at {v}: {exact} vs {fd}"
                );
            }
        }
    }

    #[test]
    fn window_is_one_inside_and_zero_outside() {
        let w = AgeFn::window(1.0, 2.0, 0.4);
        assert_eq!(w.value(1.5), 1.0);
        assert_eq!(w.value(0.7), 0.0);
        assert_eq!(w.value(2.3), 0.0);
        assert!((w.value(1.0) - 0.5).abs() < 1e-12);
        assert!((w.value(2.0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn band_is_not_c1() {
        assert!(!AgeFn::Band { lo: 0.0, hi: 1.0 }.is_c1());
        assert!(!AgeFn::window(0.0, 1.0, 0.0).is_c1());
    }

    #[test]
    fn sup_bounds_hold_on_a_grid() {
        let f = AgeFn::Product {
            factors: vec![AgeFn::linear(0.2, 0.1), AgeFn::window(0.5, 2.5, 0.5)],
        };
        let bound = f.sup_abs(0.0, 7.0);
        for k in 0..=700 {
            let v = k as f64 * 0.01;
            assert!(f.value(v).abs() <= bound);
        }
    }
}
