use serde::{Deserialize, Serialize};

use super::age_fn::AgeFn;

/// Multiplicative dependence of a rate on the functional vector `phi`,
/// where `phi[j] = (g_j, S / K)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Dependence {
    None,
    /// `max(0, 1 - phi[functional] / capacity)`
    Logistic { functional: usize, capacity: f64 },
    /// `max(0, intercept + slope * phi[functional])`
    Linear {
        functional: usize,
        intercept: f64,
        slope: f64,
    },
    /// `phi / (half + phi)`, e.g. availability of mates.
    Saturating { functional: usize, half: f64 },
    /// Piecewise-linear interpolation, flat outside the table. Declares no
    /// derivative, so it cannot drive fluctuation computations.
    Tabulated {
        functional: usize,
        phi: Vec<f64>,
        values: Vec<f64>,
    },
    Product { factors: Vec<Dependence> },
}

impl Default for Dependence {
    fn default() -> Self {
        Dependence::None
    }
}

impl Dependence {
    pub fn factor(&self, phi: &[f64]) -> f64 {
        match self {
            Dependence::None => 1.0,
            Dependence::Logistic {
                functional,
                capacity,
            } => (1.0 - phi[*functional] / capacity).max(0.0),
            Dependence::Linear {
                functional,
                intercept,
                slope,
            } => (intercept + slope * phi[*functional]).max(0.0),
            Dependence::Saturating { functional, half } => {
                let x = phi[*functional].max(0.0);
                x / (half + x)
            }
            Dependence::Tabulated {
                functional,
                phi: xs,
                values,
            } => interpolate(xs, values, phi[*functional]),
            Dependence::Product { factors } => factors.iter().map(|f| f.factor(phi)).product(),
        }
    }

    /// Adds `scale * d factor / d phi` into `out`. Returns `false` when the
    /// dependence does not declare derivatives.
    pub fn add_gradient(&self, phi: &[f64], scale: f64, out: &mut [f64]) -> bool {
        match self {
            Dependence::None => true,
            Dependence::Logistic {
                functional,
                capacity,
            } => {
                if phi[*functional] < *capacity {
                    out[*functional] -= scale / capacity;
                }
                true
            }
            Dependence::Linear {
                functional,
                intercept,
                slope,
            } => {
                if intercept + slope * phi[*functional] > 0.0 {
                    out[*functional] += scale * slope;
                }
                true
            }
            Dependence::Saturating { functional, half } => {
                let x = phi[*functional].max(0.0);
                out[*functional] += scale * half / ((half + x) * (half + x));
                true
            }
            Dependence::Tabulated { .. } => false,
            Dependence::Product { factors } => {
                let values: Vec<f64> = factors.iter().map(|f| f.factor(phi)).collect();
                for (k, f) in factors.iter().enumerate() {
                    let others: f64 = values
                        .iter()
                        .enumerate()
                        .filter(|(j, _)| *j != k)
                        .map(|(_, v)| v)
                        .product();
                    if !f.add_gradient(phi, scale * others, out) {
                        return false;
                    }
                }
                true
            }
        }
    }

    pub fn has_derivatives(&self) -> bool {
        match self {
            Dependence::Tabulated { .. } => false,
            Dependence::Product { factors } => factors.iter().all(Dependence::has_derivatives),
            _ => true,
        }
    }

    /// Upper bound of the factor for `0 <= phi <= phi_max` (componentwise).
    /// `None` when unbounded on that range or the range is unknown.
    pub fn sup(&self, phi_max: Option<&[f64]>) -> Option<f64> {
        match self {
            Dependence::None => Some(1.0),
            Dependence::Logistic { .. } | Dependence::Saturating { .. } => Some(1.0),
            Dependence::Linear {
                functional,
                intercept,
                slope,
            } => {
                if *slope <= 0.0 {
                    Some(intercept.max(0.0))
                } else {
                    let range = phi_max?;
                    Some((intercept + slope * range.get(*functional)?).max(0.0))
                }
            }
            Dependence::Tabulated { values, .. } => {
                Some(values.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
            }
            Dependence::Product { factors } => factors.iter().map(|f| f.sup(phi_max)).product(),
        }
    }

    /// Lipschitz constant in the l1 norm on `phi`, over the same range as [`Dependence::sup`].
    pub fn lipschitz(&self, phi_max: Option<&[f64]>) -> Option<f64> {
        match self {
            Dependence::None => Some(0.0),
            Dependence::Logistic { capacity, .. } => Some(1.0 / capacity),
            Dependence::Linear { slope, .. } => Some(slope.abs()),
            Dependence::Saturating { half, .. } => Some(1.0 / half),
            Dependence::Tabulated { phi, values, .. } => Some(
                phi.windows(2)
                    .zip(values.windows(2))
                    .map(|(x, y)| ((y[1] - y[0]) / (x[1] - x[0])).abs())
                    .fold(0.0, f64::max),
            ),
            Dependence::Product { factors } => {
                // |prod f - prod f'| <= sum_k L_k * prod_{j != k} sup_j
                let sups: Option<Vec<f64>> = factors.iter().map(|f| f.sup(phi_max)).collect();
                let sups = sups?;
                let mut total = 0.0;
                for (k, f) in factors.iter().enumerate() {
                    let others: f64 = sups
                        .iter()
                        .enumerate()
                        .filter(|(j, _)| *j != k)
                        .map(|(_, s)| s.abs())
                        .product();
                    total += f.lipschitz(phi_max)? * others;
                }
                Some(total)
            }
        }
    }

    /// Largest functional index referenced.
    pub fn max_functional(&self) -> Option<usize> {
        match self {
            Dependence::None => None,
            Dependence::Logistic { functional, .. }
            | Dependence::Linear { functional, .. }
            | Dependence::Saturating { functional, .. }
            | Dependence::Tabulated { functional, .. } => Some(*functional),
            Dependence::Product { factors } => {
                factors.iter().filter_map(Dependence::max_functional).max()
            }
        }
    }
}

fn interpolate(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    if x <= xs[0] {
        return ys[0];
    }
    if x >= xs[xs.len() - 1] {
        return ys[ys.len() - 1];
    }
    let k = xs.partition_point(|&p| p <= x) - 1;
    let t = (x - xs[k]) / (xs[k + 1] - xs[k]);
    ys[k] + t * (ys[k + 1] - ys[k])
}

/// A rate `q(i, v; phi) = profile_i(v) * dependence(phi)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateFn {
    pub profiles: Vec<AgeFn>,
    #[serde(default)]
    pub dependence: Dependence,
}

impl RateFn {
    pub fn new(profiles: Vec<AgeFn>, dependence: Dependence) -> Self {
        RateFn {
            profiles,
            dependence,
        }
    }

    pub fn constant(n_types: usize, value: f64) -> Self {
        RateFn::new(vec![AgeFn::constant(value); n_types], Dependence::None)
    }

    pub fn zero(n_types: usize) -> Self {
        RateFn::constant(n_types, 0.0)
    }

    #[inline]
    pub fn profile(&self, kind: usize, age: f64) -> f64 {
        self.profiles[kind].value(age)
    }

    #[inline]
    pub fn value(&self, kind: usize, age: f64, phi: &[f64]) -> f64 {
        let p = self.profile(kind, age);
        if p == 0.0 {
            0.0
        } else {
            p * self.dependence.factor(phi)
        }
    }

    /// Adds `scale * d q(kind, age; phi) / d phi` into `out`.
    pub fn add_gradient(
        &self,
        kind: usize,
        age: f64,
        phi: &[f64],
        scale: f64,
        out: &mut [f64],
    ) -> bool {
        let p = self.profile(kind, age);
        self.dependence.add_gradient(phi, scale * p, out)
    }

    pub fn has_derivatives(&self) -> bool {
        self.dependence.has_derivatives()
    }

    pub fn is_age_free(&self) -> bool {
        self.profiles.iter().all(AgeFn::is_constant)
    }

    pub fn is_zero(&self) -> bool {
        self.profiles
            .iter()
            .all(|p| matches!(p, AgeFn::Constant { value } if *value == 0.0))
    }

    pub fn sup(&self, omega: f64, phi_max: Option<&[f64]>) -> Option<f64> {
        let profile = self
            .profiles
            .iter()
            .map(|p| p.sup_abs(0.0, omega))
            .fold(0.0, f64::max);
        Some(profile * self.dependence.sup(phi_max)?)
    }

    pub fn lipschitz(&self, omega: f64, phi_max: Option<&[f64]>) -> Option<f64> {
        let profile = self
            .profiles
            .iter()
            .map(|p| p.sup_abs(0.0, omega))
            .fold(0.0, f64::max);
        Some(profile * self.dependence.lipschitz(phi_max)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn finite_difference(dep: &Dependence, phi: &[f64], j: usize) -> f64 {
        let h = 1e-7;
        let mut up = phi.to_vec();
        let mut down = phi.to_vec();
        up[j] += h;
        down[j] -= h;
        (dep.factor(&up) - dep.factor(&down)) / (2.0 * h)
    }

    #[test]
    fn gradients_match_finite_differences() {
        let deps = [
            Dependence::Logistic {
                functional: 0,
                capacity: 3.0,
            },
            Dependence::Linear {
                functional: 1,
                intercept: 1.0,
                slope: 0.4,
            },
            Dependence::Saturating {
                functional: 1,
                half: 0.5,
            },
            Dependence::Product {
                factors: vec![
                    Dependence::Logistic {
                        functional: 0,
                        capacity: 4.0,
                    },
                    Dependence::Saturating {
                        functional: 1,
                        half: 0.2,
                    },
                ],
            },
        ];
        let phi = [1.3, 0.7];
        for dep in &deps {
            let mut grad = [0.0; 2];
            assert!(dep.add_gradient(&phi, 1.0, &mut grad));
            for j in 0..2 {
                let fd = finite_difference(dep, &phi, j);
                assert!((grad[j] - fd).abs() < 1e-6, "{dep:?} j={j}: {} vs {fd}", grad[j]);
            }
        }
    }

    #[test]
    fn logistic_clamps_at_capacity() {
        let dep = Dependence::Logistic {
            functional: 0,
            capacity: 2.0,
        };
        assert_eq!(dep.factor(&[3.0]), 0.0);
        assert_eq!(dep.factor(&[1.0]), 0.5);
    }

    #[test]
    fn tabulated_has_no_derivative() {
        let dep = Dependence::Tabulated {
            functional: 0,
            phi: vec![0.0, 1.0, 2.0],
            values: vec![1.0, 0.5, 0.0],
        };
        assert!(!dep.has_derivatives());
        assert_eq!(dep.factor(&[1.5]), 0.25);
        assert_eq!(dep.factor(&[-1.0]), 1.0);
        assert_eq!(dep.lipschitz(None), Some(0.5));
    }

    #[test]
    fn linear_sup_needs_range_when_increasing() {
        let dep = Dependence::Linear {
            functional: 0,
            intercept: 1.0,
            slope: 0.5,
        };
        assert_eq!(dep.sup(None), None);
        assert_eq!(dep.sup(Some(&[4.0])), Some(3.0));
    }
}
