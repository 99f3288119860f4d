use popdyn::model::OffspringLaw;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn normalise(w: &[f64]) -> Vec<f64> {
    let s: f64 = w.iter().sum();
    w.iter().map(|x| x / s).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    /// Litter moments: E n_i = p_i E L and E n_i n_j = p_i p_j E L(L-1) + [i = j] p_i E L.
    #[test]
    fn litter_samples_match_multinomial_moments(
        sizes in prop::collection::vec(0.01f64..1.0, 1..5),
        types in prop::collection::vec(0.05f64..1.0, 2..4),
        seed in any::<u64>(),
    ) {
        let sizes = normalise(&sizes);
        let p = normalise(&types);
        let n = p.len();
        let law = OffspringLaw::Litter { sizes: sizes.clone(), type_probs: p.clone() };
        let table = law.compile(n).unwrap();
        let el: f64 = sizes.iter().enumerate().map(|(k, q)| k as f64 * q).sum();
        let ell: f64 = sizes.iter().enumerate().map(|(k, q)| (k * k.saturating_sub(1)) as f64 * q).sum();
        for i in 0..n {
            prop_assert!((table.mean()[i] - p[i] * el).abs() < 1e-12);
            for j in 0..n {
                let want = p[i] * p[j] * ell + if i == j { p[i] * el } else { 0.0 };
                prop_assert!((table.gamma(i, j) - want).abs() < 1e-12);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let draws = 20_000;
        let mut sum = vec![0.0; n];
        let mut sq = vec![0.0; n];
        for _ in 0..draws {
            let c = table.sample(&mut rng);
            for i in 0..n {
                sum[i] += c[i] as f64;
                sq[i] += (c[i] as f64).powi(2);
            }
        }
        for i in 0..n {
            let m = sum[i] / draws as f64;
            let var = table.gamma(i, i) - table.mean()[i].powi(2);
            let se = (var / draws as f64).sqrt();
            prop_assert!((m - table.mean()[i]).abs() <= 5.0 * se + 1e-12, "type {} mean {} vs {}", i, m, table.mean()[i]);
        }
    }

    /// Truncated Poisson means against the direct series.
    #[test]
    fn capped_poisson_means(means in prop::collection::vec(0.0f64..4.0, 1..3), cap in 1u32..8) {
        let table = OffspringLaw::Poisson { means: means.clone(), cap }.compile(means.len()).unwrap();
        for (i, &m) in means.iter().enumerate() {
            let w: Vec<f64> = (0..=cap).map(|k| {
                let ln_fact: f64 = (1..=k).map(|x| (x as f64).ln()).sum();
                if m == 0.0 { if k == 0 { 1.0 } else { 0.0 } } else { (k as f64 * m.ln() - ln_fact).exp() }
            }).collect();
            let z: f64 = w.iter().sum();
            let want: f64 = w.iter().enumerate().map(|(k, x)| k as f64 * x).sum::<f64>() / z;
            prop_assert!((table.mean()[i] - want).abs() < 1e-10);
            prop_assert!(table.max_count() <= cap);
        }
    }
}
