use std::sync::Arc;

use desp_core::data::{DataPoint, ScenarioSet};
use desp_core::dep::{is_feasible, solutions_equal, solve, DepInstance, SolverConfig, SolverId};
use desp_core::problem::ProblemSpec;
use desp_core::sdds::{
    enumerate_sdds, find_bfds, index_subsets, r_bar_vector, ProbeSettings, SddsError, SddsFamily,
};

fn scenarios(rows: &[&[f64]]) -> ScenarioSet {
    ScenarioSet {
        scenarios: rows.iter().map(|r| DataPoint::new(r.to_vec())).collect(),
        counts: vec![1; rows.len()],
    }
}

fn bound_spec() -> ProblemSpec {
    ProblemSpec::from_json(r#"{"n":1,"u":1,"objective":"x1","constraints":["xi1 - x1"],"bounds":[[-10,10]],"start":[0]}"#)
        .unwrap()
}

fn overlap() -> (ProblemSpec, ScenarioSet, SolverConfig) {
    let spec = ProblemSpec::from_json(
        r#"{"n":2,"u":3,"objective":"-x1^2","constraints":["xi1*x1 + xi2*x2 - xi3"],"bounds":[[-3,3],[-3,3]],"start":[0,0]}"#,
    )
    .unwrap();
    let full = scenarios(&[
        &[-1.0, 0.0, 2.5],
        &[1.0, 1.0, 3.0],
        &[-1.0, 0.0, 1.0],
        &[1.0, -1.0, 1.0],
        &[-1.0, 0.0, 1.5],
        &[0.0, 1.0, 3.0],
        &[1.0, 1.0, 3.5],
        &[0.0, -1.0, 3.0],
    ]);
    let mut cfg = SolverConfig::with_solver(SolverId::GridOracle);
    cfg.grid_resolution = 601;
    (spec, full, cfg)
}

#[test]
fn single_bound_family() {
    let full = scenarios(&[&[1.0], &[3.0], &[2.0]]);
    for id in [SolverId::BuiltinPenalty, SolverId::GridOracle] {
        let fam = enumerate_sdds(&bound_spec(), &full, &SolverConfig::with_solver(id)).unwrap();
        assert_eq!(fam.sets, vec![vec![1]], "{id:?}");
        let r: Vec<(Vec<usize>, usize)> = fam.r_bar.iter().map(|e| (e.subset.clone(), e.r_bar)).collect();
        assert_eq!(r, vec![(vec![0], 1)]);
    }
}

#[test]
fn interior_optimum_has_empty_family() {
    let spec = ProblemSpec::from_json(
        r#"{"n":1,"u":1,"objective":"(x1 - 1)^2","constraints":["xi1 - x1"],"bounds":[[-10,10]],"start":[0]}"#,
    )
    .unwrap();
    let fam = enumerate_sdds(&spec, &scenarios(&[&[-3.0], &[-1.0], &[0.0]]), &SolverConfig::default()).unwrap();
    assert!(fam.is_empty());
    assert!(matches!(r_bar_vector(&fam), Err(SddsError::FamilyEmpty)));
}

#[test]
fn overlapping_sets_union_sizes() {
    let (spec, full, cfg) = overlap();
    let fam = enumerate_sdds(&spec, &full, &cfg).unwrap();
    let mut sets = fam.sets.clone();
    sets.sort();
    assert_eq!(sets, vec![vec![1, 2, 3], vec![1, 3, 4]]);
    let r: Vec<usize> = fam.r_bar.iter().map(|e| e.r_bar).collect();
    assert_eq!(r, vec![3, 3, 4]);
}

#[test]
fn family_members_reproduce_and_are_critical() {
    let (spec, full, cfg) = overlap();
    let fam = enumerate_sdds(&spec, &full, &cfg).unwrap();
    let spec = Arc::new(spec);
    let reference = solve(&DepInstance::from_scenarios(Arc::clone(&spec), full.clone()).unwrap(), &cfg).unwrap();
    assert_eq!(fam.reference_x, reference.x_star);
    for set in &fam.sets {
        let sol = solve(&DepInstance::from_scenarios(Arc::clone(&spec), full.select(set)).unwrap(), &cfg).unwrap();
        assert!(solutions_equal(&sol, &reference, cfg.sol_tol), "{set:?}");
        for drop in 0..set.len() {
            let rest: Vec<usize> = set.iter().enumerate().filter(|&(i, _)| i != drop).map(|(_, &s)| s).collect();
            let changed = if rest.is_empty() {
                true
            } else {
                let s = solve(&DepInstance::from_scenarios(Arc::clone(&spec), full.select(&rest)).unwrap(), &cfg).unwrap();
                !solutions_equal(&s, &reference, cfg.sol_tol)
            };
            assert!(changed, "{set:?} minus position {drop}");
        }
    }
    for (i, a) in fam.sets.iter().enumerate() {
        for b in &fam.sets[i + 1..] {
            assert_ne!(a, b);
        }
    }
}

#[test]
fn enumeration_is_deterministic() {
    let (spec, full, cfg) = overlap();
    let a = enumerate_sdds(&spec, &full, &cfg).unwrap();
    let b = enumerate_sdds(&spec, &full, &cfg).unwrap();
    assert_eq!(a.to_json(), b.to_json());
}

#[test]
fn too_many_scenarios_refused() {
    let rows: Vec<Vec<f64>> = (0..16).map(|i| vec![i as f64]).collect();
    let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
    assert!(matches!(
        enumerate_sdds(&bound_spec(), &scenarios(&refs), &SolverConfig::default()),
        Err(SddsError::TooManyScenarios { got: 16, limit: 15 })
    ));
}

#[test]
fn union_table_shapes() {
    let fam = SddsFamily::from_sets(Vec::new(), vec![vec![0]], SolverConfig::default()).unwrap();
    let r: Vec<(Vec<usize>, usize)> = r_bar_vector(&fam).unwrap().into_iter().map(|e| (e.subset, e.r_bar)).collect();
    assert_eq!(r, vec![(vec![0], 1)]);
    let fam = SddsFamily::from_sets(Vec::new(), vec![vec![0, 1], vec![1, 2]], SolverConfig::default()).unwrap();
    let r: Vec<(Vec<usize>, usize)> = r_bar_vector(&fam).unwrap().into_iter().map(|e| (e.subset, e.r_bar)).collect();
    assert_eq!(r, vec![(vec![0], 2), (vec![1], 2), (vec![0, 1], 3)]);
    let fam = SddsFamily::from_sets(Vec::new(), vec![vec![0], vec![1], vec![2]], SolverConfig::default()).unwrap();
    assert_eq!(r_bar_vector(&fam).unwrap().len(), 7);
    assert_eq!(index_subsets(3).len(), 7);
    assert_eq!(index_subsets(3)[3], vec![0, 1]);
}

#[test]
fn family_json_round_trip_and_fingerprint() {
    let full = scenarios(&[&[1.0], &[3.0], &[2.0]]);
    let cfg = SolverConfig::default();
    let fam = enumerate_sdds(&bound_spec(), &full, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("family.json");
    fam.save(&path).unwrap();
    let back = SddsFamily::load(&path).unwrap();
    assert_eq!(back, fam);
    assert!(back.check_fingerprint(&bound_spec(), &cfg).is_ok());
    let mut other = cfg.clone();
    other.sol_tol = 1e-3;
    assert!(matches!(back.check_fingerprint(&bound_spec(), &other), Err(SddsError::FingerprintMismatch)));
}

#[test]
fn bfds_of_bound_constraints() {
    let r = find_bfds(&bound_spec(), &scenarios(&[&[1.0], &[2.0], &[3.0]]), &ProbeSettings::default()).unwrap();
    assert_eq!(r.bfds, vec![2]);
    assert!(r.certified);

    let r = find_bfds(&bound_spec(), &scenarios(&[&[1.0]]), &ProbeSettings::default()).unwrap();
    assert_eq!(r.bfds, vec![0]);
    let r = find_bfds(&bound_spec(), &scenarios(&[&[-50.0]]), &ProbeSettings::default()).unwrap();
    assert!(r.bfds.is_empty());
}

#[test]
fn bfds_keeps_first_of_duplicate_geometry() {
    let spec = ProblemSpec::from_json(
        r#"{"n":1,"u":2,"objective":"x1","constraints":["xi1 - x1"],"bounds":[[-10,10]],"start":[0]}"#,
    )
    .unwrap();
    let r = find_bfds(&spec, &scenarios(&[&[0.0, 0.0], &[2.0, 1.0], &[2.0, 5.0]]), &ProbeSettings::default()).unwrap();
    assert_eq!(r.bfds, vec![1]);
    assert!(!r.unique);
}

#[test]
fn bfds_matches_full_set_on_probes() {
    let spec = ProblemSpec::from_json(
        r#"{"n":2,"u":3,"objective":"x1 + x2","constraints":["xi1*x1 + xi2*x2 - xi3"],"bounds":[[-3,3],[-3,3]],"start":[0,0]}"#,
    )
    .unwrap();
    let full = scenarios(&[
        &[1.0, 1.0, 2.0],
        &[1.0, 1.0, 4.0],
        &[-1.0, 0.0, 1.0],
        &[0.0, -1.0, 1.0],
        &[1.0, -1.0, 5.0],
    ]);
    let r = find_bfds(&spec, &full, &ProbeSettings::default()).unwrap();
    let spec = Arc::new(spec);
    let all = DepInstance::from_scenarios(Arc::clone(&spec), full.clone()).unwrap();
    let sub = DepInstance::from_scenarios(Arc::clone(&spec), full.select(&r.bfds)).unwrap();
    assert!(!r.probe_points.is_empty());
    for p in &r.probe_points {
        assert_eq!(is_feasible(&all, p, 1e-8).unwrap(), is_feasible(&sub, p, 1e-8).unwrap(), "{p:?}");
    }
    assert_eq!(r.bfds, vec![0, 2, 3]);
}
