use std::io::{BufRead, BufReader};

use desp_core::dep::SolverConfig;
use desp_core::learn::{predict_r_bar, LearnError};
use desp_core::store::{RBarSource, RunRecord, RunStore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn record(delta: Vec<f64>, r_bar: Vec<usize>) -> RunRecord {
    let family_size = (r_bar.len() + 1).trailing_zeros() as usize;
    let fingerprint = SolverConfig {
        start: Some(vec![0.0, 0.0]),
        ..SolverConfig::default()
    };
    RunRecord {
        problem_digest: "abc".into(),
        delta,
        r_bar,
        family_size,
        r_bar_source: RBarSource::Enumerated,
        fingerprint,
        seed: 1,
        prng: "chacha8".into(),
        alpha: 0.1,
        eta: 0.5,
        z: 4,
        x_star: vec![3.0, 3.0],
        objective: 6.0,
        timestamp: 1_700_000_000,
        dataset_digest: "def".into(),
    }
}

#[test]
fn round_trip_and_empty_query() {
    let dir = tempfile::tempdir().unwrap();
    let store = RunStore::new(dir.path().join("runs.jsonl"));
    assert!(store.query("abc").unwrap().records.is_empty());
    let r = record(vec![0.5], vec![2, 3, 4]);
    store.append(&r).unwrap();
    assert_eq!(store.query("abc").unwrap().records, vec![r]);
    assert!(store.query("other").unwrap().records.is_empty());
}

#[test]
fn thousand_appends() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("runs.jsonl");
    let store = RunStore::new(&path);
    for i in 0..1000 {
        store.append(&record(vec![i as f64], vec![1 + i % 3])).unwrap();
    }
    let lines: Vec<String> = BufReader::new(std::fs::File::open(&path).unwrap())
        .lines()
        .map(Result::unwrap)
        .collect();
    assert_eq!(lines.len(), 1000);
    for line in &lines {
        serde_json::from_str::<RunRecord>(line).unwrap();
    }
    let loaded = store.load().unwrap();
    assert_eq!(loaded.records.len(), 1000);
    assert!(loaded.corrupt.is_empty());
}

#[test]
fn concurrent_appends_stay_whole() {
    let dir = tempfile::tempdir().unwrap();
    let store = RunStore::new(dir.path().join("runs.jsonl"));
    std::thread::scope(|s| {
        for t in 0..4 {
            let store = store.clone();
            s.spawn(move || {
                for i in 0..100 {
                    store.append(&record(vec![t as f64, i as f64], vec![2])).unwrap();
                }
            });
        }
    });
    let loaded = store.load().unwrap();
    assert_eq!(loaded.records.len(), 400);
    assert!(loaded.corrupt.is_empty());
}

#[test]
fn single_neighbour_is_verbatim() {
    let recs = vec![record(vec![1.0, 2.0], vec![3, 2, 4])];
    assert_eq!(predict_r_bar(&recs, &[-7.0, 9.0], 1).unwrap(), vec![3, 2, 4]);
}

#[test]
fn median_of_two() {
    let recs = vec![record(vec![0.0], vec![3]), record(vec![1.0], vec![5])];
    assert_eq!(predict_r_bar(&recs, &[0.5], 2).unwrap(), vec![4]);
    let recs = vec![record(vec![0.0], vec![3]), record(vec![1.0], vec![4])];
    assert_eq!(predict_r_bar(&recs, &[0.5], 2).unwrap(), vec![4]);
}

#[test]
fn learner_refusals() {
    let recs = vec![record(vec![0.0], vec![3]), record(vec![1.0], vec![1, 1, 2])];
    assert!(matches!(predict_r_bar(&recs, &[0.0], 2), Err(LearnError::MixedFamilySizes(_))));
    assert!(matches!(
        predict_r_bar(&recs[..1], &[0.0], 2),
        Err(LearnError::InsufficientHistory { have: 1, need: 2 })
    ));
    let mut predicted = record(vec![0.0], vec![9]);
    predicted.r_bar_source = RBarSource::Predicted;
    assert!(matches!(
        predict_r_bar(&[predicted], &[0.0], 1),
        Err(LearnError::InsufficientHistory { have: 0, .. })
    ));
}

#[test]
fn synthetic_rule_is_learned() {
    let truth = |d: f64| (2.0 + d.abs()).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let recs: Vec<RunRecord> = (0..50)
        .map(|_| {
            let d = rng.gen_range(-3.0..=3.0);
            record(vec![d], vec![truth(d)])
        })
        .collect();
    let mut conservative = 0;
    for _ in 0..20 {
        let d: f64 = rng.gen_range(-3.0..=3.0);
        let got = predict_r_bar(&recs, &[d], 5).unwrap()[0];
        assert!(got.abs_diff(truth(d)) <= 1, "delta {d}: {got} vs {}", truth(d));
        if got >= truth(d) {
            conservative += 1;
        }
    }
    println!("conservative predictions: {conservative}/20");
}
