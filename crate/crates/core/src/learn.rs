//! k-nearest-neighbour prediction of the union sizes from past runs.

use thiserror::Error;

use crate::store::{RBarSource, RunRecord};

#[derive(Debug, Error, PartialEq)]
pub enum LearnError {
    #[error("need {need} enumerated records, have {have}")]
    InsufficientHistory { have: usize, need: usize },
    #[error("records disagree on the family size: {0:?}")]
    MixedFamilySizes(Vec<usize>),
    #[error("delta has {got} components, records have {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("k must be positive")]
    ZeroK,
}

/// Componentwise median of the `k` nearest enumerated records, rounded up.
/// Distances are Euclidean after standardizing each δ component by the
/// records' mean and standard deviation; ties keep append order.
pub fn predict_r_bar(records: &[RunRecord], delta: &[f64], k: usize) -> Result<Vec<usize>, LearnError> {
    if k == 0 {
        return Err(LearnError::ZeroK);
    }
    let train: Vec<&RunRecord> = records
        .iter()
        .filter(|r| r.r_bar_source == RBarSource::Enumerated)
        .collect();
    if train.len() < k {
        return Err(LearnError::InsufficientHistory {
            have: train.len(),
            need: k,
        });
    }
    let mut sizes: Vec<usize> = train.iter().map(|r| r.family_size).collect();
    sizes.sort_unstable();
    sizes.dedup();
    if sizes.len() > 1 {
        return Err(LearnError::MixedFamilySizes(sizes));
    }
    let dim = train[0].delta.len();
    if let Some(r) = train.iter().find(|r| r.delta.len() != dim) {
        return Err(LearnError::DimensionMismatch {
            expected: dim,
            got: r.delta.len(),
        });
    }
    if delta.len() != dim {
        return Err(LearnError::DimensionMismatch {
            expected: dim,
            got: delta.len(),
        });
    }

    let n = train.len() as f64;
    let scale: Vec<(f64, f64)> = (0..dim)
        .map(|j| {
            let mean = train.iter().map(|r| r.delta[j]).sum::<f64>() / n;
            let var = train.iter().map(|r| (r.delta[j] - mean).powi(2)).sum::<f64>() / n;
            let sd = var.sqrt();
            (mean, if sd > 0.0 { sd } else { 1.0 })
        })
        .collect();
    let standardize = |v: &[f64]| -> Vec<f64> { v.iter().zip(&scale).map(|(x, (m, s))| (x - m) / s).collect() };
    let q = standardize(delta);
    let mut by_distance: Vec<(f64, usize)> = train
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let p = standardize(&r.delta);
            let d2: f64 = p.iter().zip(&q).map(|(a, b)| (a - b).powi(2)).sum();
            (d2, i)
        })
        .collect();
    by_distance.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let neighbours: Vec<&RunRecord> = by_distance[..k].iter().map(|&(_, i)| train[i]).collect();

    let width = neighbours[0].r_bar.len();
    Ok((0..width)
        .map(|j| {
            let mut col: Vec<usize> = neighbours.iter().map(|r| r.r_bar[j]).collect();
            col.sort_unstable();
            let m = col.len();
            if m % 2 == 1 {
                col[m / 2]
            } else {
                (col[m / 2 - 1] + col[m / 2]).div_ceil(2)
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dep::SolverConfig;

    fn rec(delta: Vec<f64>, r_bar: Vec<usize>, family_size: usize) -> RunRecord {
        RunRecord {
            problem_digest: "p".into(),
            delta,
            r_bar,
            family_size,
            r_bar_source: RBarSource::Enumerated,
            fingerprint: SolverConfig::default(),
            seed: 0,
            prng: "chacha8".into(),
            alpha: 0.1,
            eta: 0.5,
            z: 1,
            x_star: vec![],
            objective: 0.0,
            timestamp: 0,
            dataset_digest: String::new(),
        }
    }

    #[test]
    fn single_record_is_returned_verbatim() {
        let r = rec(vec![1.0], vec![3, 2, 4], 2);
        assert_eq!(predict_r_bar(&[r], &[100.0], 1).unwrap(), vec![3, 2, 4]);
    }

    #[test]
    fn even_median_rounds_up() {
        let rs = [rec(vec![0.0], vec![3], 1), rec(vec![1.0], vec![5], 1)];
        assert_eq!(predict_r_bar(&rs, &[0.5], 2).unwrap(), vec![4]);
        let rs = [rec(vec![0.0], vec![3], 1), rec(vec![1.0], vec![4], 1)];
        assert_eq!(predict_r_bar(&rs, &[0.5], 2).unwrap(), vec![4]);
    }

    #[test]
    fn errors() {
        let rs = [rec(vec![0.0], vec![3], 1), rec(vec![1.0], vec![1, 1, 2], 2)];
        assert_eq!(predict_r_bar(&rs, &[0.0], 3), Err(LearnError::InsufficientHistory { have: 2, need: 3 }));
        assert_eq!(predict_r_bar(&rs, &[0.0], 1), Err(LearnError::MixedFamilySizes(vec![1, 2])));
        let mut p = rec(vec![0.0], vec![3], 1);
        p.r_bar_source = RBarSource::Predicted;
        assert!(matches!(predict_r_bar(&[p], &[0.0], 1), Err(LearnError::InsufficientHistory { .. })));
    }
}
