use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Zero};

use desp_core::data::DataSet;
use desp_core::dep::SolverConfig;
use desp_core::rng::mix;
use desp_core::sample_size::{
    binomial, draw_d_emb, draw_indices, min_z, monte_carlo_rho, rho, rho_exact, rho_table_exact, RhoInput,
    SampleSizeError, SampleSizePlan,
};
use desp_core::sdds::SddsFamily;
use proptest::prelude::*;

fn family(sets: Vec<Vec<usize>>) -> SddsFamily {
    SddsFamily::from_sets(Vec::new(), sets, SolverConfig::default()).unwrap()
}

fn q(a: i64, b: i64) -> BigRational {
    BigRational::new(BigInt::from(a), BigInt::from(b))
}

#[test]
fn singleton_of_size_one() {
    let input = RhoInput::new(10, vec![(1, 1)]).unwrap();
    for z in 0..=10 {
        assert_eq!(rho_exact(&input, z).unwrap(), q(z as i64, 10));
    }
    assert_eq!(rho(&input, 5).unwrap(), 0.5);
    assert_eq!(min_z(&input, 0.5).unwrap().z, 5);
}

#[test]
fn disjoint_singletons() {
    let input = RhoInput::new(10, vec![(1, 1), (1, 1), (2, 2)]).unwrap();
    assert_eq!(rho_exact(&input, 1).unwrap(), q(1, 5));
}

#[test]
fn full_draw_is_certain() {
    let cases = [
        (vec![vec![0]], 12),
        (vec![vec![0, 1, 2], vec![1, 2, 3]], 12),
        // disjoint sets: one missing point never breaks both
        (vec![vec![0, 4], vec![5, 6, 7]], 11),
    ];
    for (sets, z) in cases {
        let input = RhoInput::from_family(&family(sets), 12).unwrap();
        assert!(rho_exact(&input, 12).unwrap().is_one());
        assert_eq!(min_z(&input, 1.0).unwrap().z, z);
    }
}

#[test]
fn tiny_target_gives_smallest_set() {
    let input = RhoInput::from_family(&family(vec![vec![0, 1, 2], vec![3, 4]]), 9).unwrap();
    assert_eq!(min_z(&input, 1e-12).unwrap().z, 2);
}

#[test]
fn bad_inputs() {
    assert!(matches!(
        RhoInput::new(3, vec![(1, 4)]),
        Err(SampleSizeError::AssumptionViolated { .. })
    ));
    assert!(RhoInput::new(10, vec![(1, 1), (1, 1)]).is_err());
    let input = RhoInput::new(4, vec![(1, 2)]).unwrap();
    assert!(matches!(rho_exact(&input, 5), Err(SampleSizeError::ZTooLarge { .. })));
    assert!(min_z(&input, 0.0).is_err());
    let d = DataSet::from_rows(&[&[1.0], &[2.0]]).unwrap();
    assert!(matches!(draw_d_emb(&d, 3, 0), Err(SampleSizeError::ZTooLarge { .. })));
}

#[test]
fn empty_family_needs_nothing() {
    let input = RhoInput::new(6, Vec::new()).unwrap();
    assert!(rho_exact(&input, 0).unwrap().is_one());
    assert_eq!(min_z(&input, 1.0).unwrap().z, 0);
}

#[test]
fn monte_carlo_edges() {
    let fam = family(vec![vec![0]]);
    let mc = monte_carlo_rho(&fam, 10, 5, 100_000, 3).unwrap();
    assert!((mc - 0.5).abs() <= 0.005, "{mc}");
    assert_eq!(monte_carlo_rho(&fam, 10, 0, 1000, 3).unwrap(), 0.0);
    assert_eq!(monte_carlo_rho(&fam, 10, 10, 1000, 3).unwrap(), 1.0);
}

#[test]
fn monte_carlo_agrees_with_formula() {
    let trials = 40_000u64;
    let cases = [
        (vec![vec![0, 1], vec![1, 2]], 7),
        (vec![vec![0, 1, 2], vec![2, 3], vec![4]], 10),
        (vec![vec![0, 1, 2, 3]], 8),
    ];
    for (c, (sets, d)) in cases.into_iter().enumerate() {
        let fam = family(sets);
        let input = RhoInput::from_family(&fam, d).unwrap();
        for z in 0..=d {
            let r = rho(&input, z).unwrap();
            let mc = monte_carlo_rho(&fam, d, z, trials, mix(9, (c * 100 + z) as u64)).unwrap();
            let bound = 4.0 * (r * (1.0 - r) / trials as f64).sqrt() + 0.002;
            assert!((mc - r).abs() <= bound, "case {c} z {z}: {mc} vs {r}");
        }
    }
}

#[test]
fn monte_carlo_is_seeded() {
    let fam = family(vec![vec![0, 1], vec![2]]);
    let a = monte_carlo_rho(&fam, 9, 4, 10_000, 5).unwrap();
    assert_eq!(a, monte_carlo_rho(&fam, 9, 4, 10_000, 5).unwrap());
}

#[test]
fn draws() {
    let d = DataSet::from_rows(&[&[1.0], &[2.0], &[2.0], &[3.0], &[4.0]]).unwrap();
    let full = draw_d_emb(&d, 4, 8).unwrap();
    let mut got: Vec<f64> = full.points().iter().map(|p| p.values[0]).collect();
    got.sort_by(f64::total_cmp);
    assert_eq!(got, vec![1.0, 2.0, 3.0, 4.0]);
    assert_eq!(draw_d_emb(&d, 2, 8).unwrap(), draw_d_emb(&d, 2, 8).unwrap());

    let n = 10_000;
    let mut counts = [0usize; 4];
    for t in 0..n {
        counts[draw_indices(4, 1, mix(123, t)).unwrap()[0]] += 1;
    }
    for c in counts {
        assert!((c as f64 / n as f64 - 0.25).abs() <= 0.02, "{counts:?}");
    }
}

#[test]
fn plan_records_rng_and_table() {
    let input = RhoInput::new(10, vec![(1, 1)]).unwrap();
    let plan = SampleSizePlan::build(&input, 0.5, 42).unwrap();
    assert_eq!(plan.z_min, 5);
    assert_eq!(plan.seed, 42);
    assert!(!plan.prng.is_empty());
    assert_eq!(plan.rho_table.len(), 11);
    let json: serde_json::Value = serde_json::from_str(&plan.to_json()).unwrap();
    assert_eq!(json["z_min"], 5);
}

fn family_strategy() -> impl Strategy<Value = (Vec<Vec<usize>>, usize)> {
    (6usize..14).prop_flat_map(|d| {
        let set = prop::collection::btree_set(0..d, 1..=4).prop_map(|s| s.into_iter().collect::<Vec<_>>());
        (prop::collection::vec(set, 1..=4), Just(d))
    })
}

fn choose(n: usize, k: usize) -> BigRational {
    BigRational::from_integer(BigInt::from(binomial(n as i64, k as i64)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn rho_is_a_probability((sets, d) in family_strategy()) {
        let input = RhoInput::from_family(&family(sets), d).unwrap();
        let table = rho_table_exact(&input).unwrap();
        prop_assert_eq!(table.len(), d + 1);
        for (z, r) in table.iter().enumerate() {
            prop_assert!(*r >= BigRational::zero() && *r <= BigRational::one(), "z {}: {}", z, r);
        }
        prop_assert!(table[d].is_one());
        for w in table.windows(2) {
            prop_assert!(w[1] >= w[0]);
        }
    }

    #[test]
    fn singleton_matches_hypergeometric(d in 2usize..40, size in 1usize..6, z in 0usize..40) {
        let size = size.min(d);
        let z = z.min(d);
        let input = RhoInput::new(d, vec![(1, size)]).unwrap();
        let want = if z < size {
            BigRational::zero()
        } else {
            choose(d - size, z - size) / choose(d, z)
        };
        prop_assert_eq!(rho_exact(&input, z).unwrap(), want);
    }
}
