use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Joint law of per-type offspring counts produced at one reproduction event.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OffspringLaw {
    /// No offspring.
    None,
    /// Exactly `counts[i]` offspring of type `i`.
    Deterministic { counts: Vec<u32> },
    /// Independent Poisson counts per type, each conditioned on `<= cap`.
    Poisson { means: Vec<f64>, cap: u32 },
    /// Litter size `L` with `P(L = n) = sizes[n]`; each newborn independently
    /// of type `i` with probability `type_probs[i]`.
    Litter {
        sizes: Vec<f64>,
        type_probs: Vec<f64>,
    },
    /// Explicit list of outcomes.
    Table { outcomes: Vec<Outcome> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Outcome {
    pub counts: Vec<u32>,
    pub prob: f64,
}

impl Default for OffspringLaw {
    fn default() -> Self {
        OffspringLaw::None
    }
}

impl OffspringLaw {
    pub fn is_none(&self) -> bool {
        matches!(self, OffspringLaw::None)
    }

    /// Enumerates the support as a compiled table over `n_types` types.
    pub fn compile(&self, n_types: usize) -> Result<OutcomeTable> {
        let mut outcomes: Vec<(Vec<u32>, f64)> = Vec::new();
        match self {
            OffspringLaw::None => outcomes.push((vec![0; n_types], 1.0)),
            OffspringLaw::Deterministic { counts } => {
                check_len("deterministic counts", counts.len(), n_types)?;
                outcomes.push((counts.clone(), 1.0));
            }
            OffspringLaw::Poisson { means, cap } => {
                check_len("poisson means", means.len(), n_types)?;
                if means.iter().any(|m| !(*m >= 0.0) || !m.is_finite()) {
                    return Err(Error::contract("poisson means must be finite and >= 0"));
                }
                let marginals: Vec<Vec<f64>> =
                    means.iter().map(|&m| truncated_poisson(m, *cap)).collect();
                let mut counts = vec![0u32; n_types];
                enumerate_product(&marginals, 0, 1.0, &mut counts, &mut outcomes);
            }
            OffspringLaw::Litter { sizes, type_probs } => {
                check_len("litter type_probs", type_probs.len(), n_types)?;
                check_probabilities("litter sizes", sizes)?;
                check_probabilities("litter type_probs", type_probs)?;
                for (n, &p) in sizes.iter().enumerate() {
                    if p == 0.0 {
                        continue;
                    }
                    let mut counts = vec![0u32; n_types];
                    enumerate_multinomial(n as u32, type_probs, 0, p, &mut counts, &mut outcomes);
                }
            }
            OffspringLaw::Table { outcomes: table } => {
                let probs: Vec<f64> = table.iter().map(|o| o.prob).collect();
                check_probabilities("table probabilities", &probs)?;
                for o in table {
                    check_len("table outcome counts", o.counts.len(), n_types)?;
                    outcomes.push((o.counts.clone(), o.prob));
                }
            }
        }
        OutcomeTable::new(n_types, outcomes)
    }
}

fn check_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::contract(format!(
            "{what}: expected {want} entries, got {got}"
        )));
    }
    Ok(())
}

fn check_probabilities(what: &str, p: &[f64]) -> Result<()> {
    if p.iter().any(|x| !(*x >= 0.0)) {
        return Err(Error::contract(format!("{what}: negative or NaN entry")));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::contract(format!("{what}: sums to {total}, not 1")));
    }
    Ok(())
}

fn truncated_poisson(mean: f64, cap: u32) -> Vec<f64> {
    let mut p = Vec::with_capacity(cap as usize + 1);
    let mut term = (-mean).exp();
    for n in 0..=cap {
        p.push(term);
        term *= mean / (n + 1) as f64;
    }
    let total: f64 = p.iter().sum();
    p.iter().map(|x| x / total).collect()
}

fn enumerate_product(
    marginals: &[Vec<f64>],
    k: usize,
    prob: f64,
    counts: &mut Vec<u32>,
    out: &mut Vec<(Vec<u32>, f64)>,
) {
    if k == marginals.len() {
        if prob > 0.0 {
            out.push((counts.clone(), prob));
        }
        return;
    }
    for (n, &p) in marginals[k].iter().enumerate() {
        counts[k] = n as u32;
        enumerate_product(marginals, k + 1, prob * p, counts, out);
    }
    counts[k] = 0;
}

/// Multinomial split of `remaining` newborns over types `k..`, by successive
/// conditional binomials.
fn enumerate_multinomial(
    remaining: u32,
    probs: &[f64],
    k: usize,
    prob: f64,
    counts: &mut Vec<u32>,
    out: &mut Vec<(Vec<u32>, f64)>,
) {
    if k + 1 == probs.len() {
        counts[k] = remaining;
        if prob > 0.0 && (remaining == 0 || probs[k] > 0.0) {
            out.push((counts.clone(), prob));
        }
        counts[k] = 0;
        return;
    }
    let tail: f64 = probs[k..].iter().sum();
    if tail <= 0.0 {
        if remaining == 0 && prob > 0.0 {
            out.push((counts.clone(), prob));
        }
        return;
    }
    let q = probs[k] / tail;
    for j in 0..=remaining {
        let p = binomial_pmf(remaining, j, q);
        if p == 0.0 {
            continue;
        }
        counts[k] = j;
        enumerate_multinomial(remaining - j, probs, k + 1, prob * p, counts, out);
    }
    counts[k] = 0;
}

fn binomial_pmf(n: u32, k: u32, p: f64) -> f64 {
    let mut c = 1.0;
    for j in 0..k {
        c *= (n - j) as f64 / (j + 1) as f64;
    }
    c * p.powi(k as i32) * (1.0 - p).powi((n - k) as i32)
}

/// Enumerated offspring law with cached moments and an inverse-CDF sampler.
#[derive(Clone, Debug)]
pub struct OutcomeTable {
    n_types: usize,
    counts: Vec<u32>,
    probs: Vec<f64>,
    cumulative: Vec<f64>,
    mean: Vec<f64>,
    gamma: Vec<f64>,
    max_count: u32,
    max_total: u32,
}

impl OutcomeTable {
    fn new(n_types: usize, outcomes: Vec<(Vec<u32>, f64)>) -> Result<Self> {
        if outcomes.is_empty() {
            return Err(Error::contract("offspring law has empty support"));
        }
        let mut counts = Vec::with_capacity(outcomes.len() * n_types);
        let mut probs = Vec::with_capacity(outcomes.len());
        for (c, p) in &outcomes {
            counts.extend_from_slice(c);
            probs.push(*p);
        }
        let total: f64 = probs.iter().sum();
        for p in probs.iter_mut() {
            *p /= total;
        }
        let mut cumulative = Vec::with_capacity(probs.len());
        let mut acc = 0.0;
        for p in &probs {
            acc += p;
            cumulative.push(acc);
        }
        let mut mean = vec![0.0; n_types];
        let mut gamma = vec![0.0; n_types * n_types];
        let mut max_count = 0;
        let mut max_total = 0;
        for (row, &p) in counts.chunks(n_types.max(1)).zip(&probs) {
            for i in 0..n_types {
                mean[i] += p * row[i] as f64;
                for j in 0..n_types {
                    gamma[i * n_types + j] += p * (row[i] as f64) * (row[j] as f64);
                }
                max_count = max_count.max(row[i]);
            }
            max_total = max_total.max(row.iter().sum());
        }
        Ok(OutcomeTable {
            n_types,
            counts,
            probs,
            cumulative,
            mean,
            gamma,
            max_count,
            max_total,
        })
    }

    pub fn n_types(&self) -> usize {
        self.n_types
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn outcome(&self, k: usize) -> (&[u32], f64) {
        let n = self.n_types;
        (&self.counts[k * n..(k + 1) * n], self.probs[k])
    }

    /// First moments `m^i`.
    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Second cross-moments `gamma^{ij}`, row-major.
    pub fn gamma(&self, i: usize, j: usize) -> f64 {
        self.gamma[i * self.n_types + j]
    }

    pub fn gamma_matrix(&self) -> &[f64] {
        &self.gamma
    }

    pub fn max_count(&self) -> u32 {
        self.max_count
    }

    pub fn max_total(&self) -> u32 {
        self.max_total
    }

    /// True when every outcome is the empty litter.
    pub fn is_trivial(&self) -> bool {
        self.max_total == 0
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> &[u32] {
        let k = if self.probs.len() == 1 {
            0
        } else {
            let u: f64 = rng.random::<f64>();
            self.cumulative
                .partition_point(|&c| c <= u)
                .min(self.probs.len() - 1)
        };
        let n = self.n_types;
        &self.counts[k * n..(k + 1) * n]
    }

    /// `sum_i f_i m^i` for per-type weights `f`.
    pub fn mean_dot(&self, f: &[f64]) -> f64 {
        self.mean.iter().zip(f).map(|(m, x)| m * x).sum()
    }

    /// `sum_{i,j} f_i f_j gamma^{ij}`.
    pub fn gamma_form(&self, f: &[f64]) -> f64 {
        let n = self.n_types;
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                s += f[i] * f[j] * self.gamma[i * n + j];
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn deterministic_moments() {
        let t = OffspringLaw::Deterministic { counts: vec![2, 1] }
            .compile(2)
            .unwrap();
        assert_eq!(t.mean(), &[2.0, 1.0]);
        assert_eq!(t.gamma(0, 0), 4.0);
        assert_eq!(t.gamma(0, 1), 2.0);
        assert_eq!(t.max_total(), 3);
    }

    #[test]
    fn litter_moments_match_multinomial_formulas() {
        // L in {1, 2} equally likely, p = (0.3, 0.7).
        let t = OffspringLaw::Litter {
            sizes: vec![0.0, 0.5, 0.5],
            type_probs: vec![0.3, 0.7],
        }
        .compile(2)
        .unwrap();
        let el = 1.5;
        let el2 = 2.5;
        let p = [0.3, 0.7];
        for i in 0..2 {
            assert!((t.mean()[i] - el * p[i]).abs() < 1e-12);
            // E[X_i^2] = E[L] p_i (1 - p_i) + E[L^2] p_i^2
            let want = el * p[i] * (1.0 - p[i]) + el2 * p[i] * p[i];
            assert!((t.gamma(i, i) - want).abs() < 1e-12);
        }
        // E[X_0 X_1] = (E[L^2] - E[L]) p_0 p_1
        assert!((t.gamma(0, 1) - (el2 - el) * 0.21).abs() < 1e-12);
    }

    #[test]
    fn three_type_litter_is_normalised() {
        let t = OffspringLaw::Litter {
            sizes: vec![0.1, 0.2, 0.3, 0.4],
            type_probs: vec![0.2, 0.5, 0.3],
        }
        .compile(3)
        .unwrap();
        let total: f64 = (0..t.len()).map(|k| t.outcome(k).1).sum();
        assert!((total - 1.0).abs() < 1e-12);
        let el = 0.2 + 0.6 + 1.2;
        assert!((t.mean()[1] - el * 0.5).abs() < 1e-12);
    }

    #[test]
    fn truncated_poisson_respects_cap() {
        let t = OffspringLaw::Poisson {
            means: vec![1.5],
            cap: 4,
        }
        .compile(1)
        .unwrap();
        assert_eq!(t.max_count(), 4);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            assert!(t.sample(&mut rng)[0] <= 4);
        }
    }

    #[test]
    fn gamma_dominates_squared_mean() {
        let t = OffspringLaw::Poisson {
            means: vec![0.8, 2.0],
            cap: 6,
        }
        .compile(2)
        .unwrap();
        for i in 0..2 {
            assert!(t.gamma(i, i) >= t.mean()[i] * t.mean()[i]);
        }
        assert!((t.gamma(0, 1) - t.gamma(1, 0)).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_probabilities() {
        assert!(OffspringLaw::Litter {
            sizes: vec![0.5, 0.6],
            type_probs: vec![1.0],
        }
        .compile(1)
        .is_err());
        assert!(OffspringLaw::Deterministic { counts: vec![1] }
            .compile(2)
            .is_err());
    }
}
