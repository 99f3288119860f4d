use popdyn::model::{
    AgeFn, Bounds, InitialBand, InitialCondition, ModelSpec, OffspringLaw, PairTestFunction, RateFn, RateModel,
};
use popdyn::monogamy::{
    simulate_monogamy, MonogamyInitial, MonogamyModel, MonogamyOptions, MonogamySpec, SingleBand,
};
use popdyn::simulator::{simulate, SimOptions};
use popdyn::stats::ks_two_sample;
use proptest::prelude::*;

fn singles(lo: f64, hi: f64, mass: f64) -> MonogamyInitial {
    let b = SingleBand {
        age_lo: lo,
        age_hi: hi,
        mass,
    };
    MonogamyInitial {
        females: vec![b.clone()],
        males: vec![b],
        couples: vec![],
    }
}

/// Without marriage the couple dynamics never start: single females bear
/// one child of either sex and everyone dies at `h`, which is a two-type
/// branching process.
#[test]
fn no_marriage_matches_two_type_branching() {
    let (b, h, t, k) = (0.9, 0.5, 2.0, 50);
    let mono = MonogamyModel::new(MonogamySpec::constant(0.0, b, h, 0.0, 0.0)).unwrap();
    let base = RateModel::new(ModelSpec {
        n_types: 2,
        birth: RateFn::new(vec![AgeFn::constant(b), AgeFn::constant(0.0)], Default::default()),
        death: RateFn::constant(2, h),
        bearing: vec![
            OffspringLaw::Litter {
                sizes: vec![0.0, 1.0],
                type_probs: vec![0.5, 0.5],
            },
            OffspringLaw::None,
        ],
        splitting: vec![],
        functionals: vec![],
        immigration: None,
        bounds: Bounds {
            b_max: Some(b),
            h_max: Some(h),
            ..Bounds::default()
        },
        phi_max: None,
    })
    .unwrap();
    let ic = singles(0.0, 1.0, 0.5);
    let base_ic = InitialCondition::new(
        (0..2)
            .map(|kind| InitialBand {
                kind,
                age_lo: 0.0,
                age_hi: 1.0,
                mass: 0.5,
            })
            .collect(),
    );
    let m0 = ic.population(k).unwrap();
    let s0 = base_ic.population(2, k).unwrap();
    let mopts = MonogamyOptions::new(t, k).without_events();
    let sopts = SimOptions::new(t, k).without_events();
    let reps = 1500;
    let x: Vec<f64> = (0..reps)
        .map(|r| simulate_monogamy(&mono, &m0, &mopts, 11, r).unwrap().final_population.head_count() as f64)
        .collect();
    let y: Vec<f64> = (0..reps)
        .map(|r| simulate(&base, &s0, &sopts, 12, r).unwrap().final_population.len() as f64)
        .collect();
    let (d, p) = ks_two_sample(&x, &y).unwrap();
    assert!(p > 1e-3, "KS distance {d}, p = {p}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    /// With only marriage and separation the head count is fixed and every
    /// person ages at unit speed whatever their marital status.
    #[test]
    fn marriage_and_separation_preserve_head_count_and_age(
        rho in 0.1f64..5.0,
        sep in 0.0f64..2.0,
        hi in 0.5f64..3.0,
        seed in any::<u64>(),
    ) {
        let k = 40;
        let model = MonogamyModel::new(MonogamySpec::constant(0.0, 0.0, 0.0, sep, rho)).unwrap();
        let s0 = singles(0.0, hi, 0.5).population(k).unwrap();
        let n = s0.head_count() as f64;
        let age = PairTestFunction::marriage_neutral("age_sum", AgeFn::linear(0.0, 1.0), AgeFn::linear(0.0, 1.0));
        let t_end = 3.0;
        let opts = MonogamyOptions::new(t_end, k)
            .with_observables(vec![PairTestFunction::head_count(), age.clone()]);
        let traj = simulate_monogamy(&model, &s0, &opts, seed, 0).unwrap();
        let a0 = s0.pair(&age);
        for (g, &t) in traj.grid.iter().enumerate() {
            prop_assert_eq!(traj.head_count[g] as f64, n);
            prop_assert_eq!(traj.series[0][g], n);
            prop_assert!((traj.series[1][g] - (a0 + n * t)).abs() < 1e-9 * (1.0 + a0 + n * t));
        }
        prop_assert!(traj.events.iter().all(|e| matches!(
            e.kind,
            popdyn::simulator::EventKind::Marriage | popdyn::simulator::EventKind::Separation
        )));
    }
}
