use std::collections::BTreeMap;
use std::path::Path;

use num_bigint::{BigInt, BigUint};
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{underlying_set, DataError, DataSet};
use crate::rng::{mix, seeded, shuffle_prefix, PRNG_NAME};
use crate::sdds::SddsFamily;

const MC_BATCH: u64 = 4096;

#[derive(Debug, Error)]
pub enum SampleSizeError {
    #[error("union size {r_bar} exceeds the probable-set size {d_alpha_size}")]
    AssumptionViolated { r_bar: usize, d_alpha_size: usize },
    #[error("z = {z} exceeds the number of distinct scenarios {available}")]
    ZTooLarge { z: usize, available: usize },
    #[error("no z reaches the target {target}")]
    NoFeasibleZ { target: f64 },
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// `D̲_α` and the `(J_j, R̄_j)` pairs. An empty list stands for the empty
/// family, which any draw reproduces.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RhoInput {
    pub d_alpha_size: usize,
    pub r_bar: Vec<(usize, usize)>,
}

impl RhoInput {
    pub fn new(d_alpha_size: usize, r_bar: Vec<(usize, usize)>) -> Result<Self, SampleSizeError> {
        let input = RhoInput { d_alpha_size, r_bar };
        input.validate()?;
        Ok(input)
    }

    pub fn from_family(family: &SddsFamily, d_alpha_size: usize) -> Result<Self, SampleSizeError> {
        Self::new(
            d_alpha_size,
            family.r_bar.iter().map(|e| (e.subset.len(), e.r_bar)).collect(),
        )
    }

    pub fn validate(&self) -> Result<(), SampleSizeError> {
        if self.d_alpha_size == 0 {
            return Err(SampleSizeError::Invalid("probable-set size must be positive".into()));
        }
        if let Some(&(_, r)) = self.r_bar.iter().find(|&&(_, r)| r > self.d_alpha_size) {
            return Err(SampleSizeError::AssumptionViolated {
                r_bar: r,
                d_alpha_size: self.d_alpha_size,
            });
        }
        if self.r_bar.is_empty() {
            return Ok(());
        }
        let len = self.r_bar.len() + 1;
        if !len.is_power_of_two() {
            return Err(SampleSizeError::Invalid(format!(
                "{} union entries is not 2^R - 1",
                self.r_bar.len()
            )));
        }
        let r = len.trailing_zeros() as usize;
        let singles = self.r_bar.iter().filter(|&&(j, _)| j == 1).count();
        if singles != r || self.r_bar.iter().any(|&(j, _)| j == 0 || j > r) {
            return Err(SampleSizeError::Invalid("union entries do not match a family".into()));
        }
        Ok(())
    }

    /// Signed inclusion-exclusion weight per distinct `R̄`.
    fn weights(&self) -> BTreeMap<usize, i64> {
        let mut w = BTreeMap::new();
        for &(j, r) in &self.r_bar {
            *w.entry(r).or_insert(0) += if j % 2 == 1 { 1 } else { -1 };
        }
        w.retain(|_, c| *c != 0);
        w
    }
}

/// `C(a, b)`, zero outside `0 ≤ b ≤ a`.
pub fn binomial(a: i64, b: i64) -> BigUint {
    if b < 0 || a < 0 || b > a {
        return BigUint::zero();
    }
    let b = b.min(a - b) as u64;
    let a = a as u64;
    let mut acc = BigUint::one();
    for i in 0..b {
        acc *= a - i;
        acc /= i + 1;
    }
    acc
}

fn check_z(input: &RhoInput, z: usize) -> Result<(), SampleSizeError> {
    input.validate()?;
    if z > input.d_alpha_size {
        return Err(SampleSizeError::ZTooLarge {
            z,
            available: input.d_alpha_size,
        });
    }
    Ok(())
}

/// Probability that a uniform `z`-subset of the probable set contains at
/// least one family member, as an exact rational.
pub fn rho_exact(input: &RhoInput, z: usize) -> Result<BigRational, SampleSizeError> {
    check_z(input, z)?;
    if input.r_bar.is_empty() {
        return Ok(BigRational::one());
    }
    let d = input.d_alpha_size as i64;
    let z = z as i64;
    let mut num = BigInt::zero();
    for (r, c) in input.weights() {
        let r = r as i64;
        num += BigInt::from(c) * BigInt::from(binomial(d - r, z - r));
    }
    Ok(BigRational::new(num, BigInt::from(binomial(d, z))))
}

pub fn rho(input: &RhoInput, z: usize) -> Result<f64, SampleSizeError> {
    Ok(to_f64(&rho_exact(input, z)?))
}

pub fn to_f64(q: &BigRational) -> f64 {
    q.to_f64().unwrap_or(f64::NAN)
}

/// `ρ(z)` for every `z = 0..=D̲_α`, exact.
pub fn rho_table_exact(input: &RhoInput) -> Result<Vec<BigRational>, SampleSizeError> {
    input.validate()?;
    let d = input.d_alpha_size;
    if input.r_bar.is_empty() {
        return Ok(vec![BigRational::one(); d + 1]);
    }
    // binomial rows built incrementally: C(m, k+1) = C(m, k)(m-k)/(k+1)
    let row = |m: usize| -> Vec<BigUint> {
        let mut out = Vec::with_capacity(m + 1);
        let mut c = BigUint::one();
        out.push(c.clone());
        for k in 0..m {
            c = c * (m - k) / (k + 1);
            out.push(c.clone());
        }
        out
    };
    let weights: Vec<(usize, i64, Vec<BigUint>)> = input
        .weights()
        .into_iter()
        .map(|(r, c)| (r, c, row(d - r)))
        .collect();
    let full = row(d);
    Ok((0..=d)
        .map(|z| {
            let mut num = BigInt::zero();
            for (r, c, binoms) in &weights {
                if z >= *r {
                    num += BigInt::from(*c) * BigInt::from(binoms[z - r].clone());
                }
            }
            BigRational::new(num, BigInt::from(full[z].clone()))
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MinZ {
    pub z: usize,
    /// False if the scan saw `ρ` decrease anywhere.
    pub monotone: bool,
}

/// Smallest `z` with `ρ(z) ≥ target`, by linear scan.
pub fn min_z(input: &RhoInput, target: f64) -> Result<MinZ, SampleSizeError> {
    if !(target > 0.0 && target <= 1.0) {
        return Err(SampleSizeError::Invalid(format!("target must lie in (0, 1], got {target}")));
    }
    let table = rho_table_exact(input)?;
    min_z_in(&table, target)
}

fn min_z_in(table: &[BigRational], target: f64) -> Result<MinZ, SampleSizeError> {
    let monotone = table.windows(2).all(|w| w[1] >= w[0]);
    let goal = BigRational::from_float(target).ok_or_else(|| SampleSizeError::Invalid("target is not finite".into()))?;
    table
        .iter()
        .position(|r| *r >= goal)
        .map(|z| MinZ { z, monotone })
        .ok_or(SampleSizeError::NoFeasibleZ { target })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleSizePlan {
    pub d_alpha_size: usize,
    pub r_bar: Vec<(usize, usize)>,
    pub target: f64,
    pub z_min: usize,
    pub monotone: bool,
    pub seed: u64,
    pub prng: String,
    pub rho_table: Vec<(usize, f64)>,
}

impl SampleSizePlan {
    pub fn build(input: &RhoInput, target: f64, seed: u64) -> Result<Self, SampleSizeError> {
        if !(target > 0.0 && target <= 1.0) {
            return Err(SampleSizeError::Invalid(format!("target must lie in (0, 1], got {target}")));
        }
        let table = rho_table_exact(input)?;
        let m = min_z_in(&table, target)?;
        Ok(SampleSizePlan {
            d_alpha_size: input.d_alpha_size,
            r_bar: input.r_bar.clone(),
            target,
            z_min: m.z,
            monotone: m.monotone,
            seed,
            prng: PRNG_NAME.to_owned(),
            rho_table: table.iter().enumerate().map(|(z, q)| (z, to_f64(q))).collect(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), SampleSizeError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }
}

/// Maps the scenarios used by `family` onto `0..k` and returns the sets
/// in that index space.
fn compact_sets(sets: &[Vec<usize>], d_alpha_size: usize) -> Result<Vec<Vec<usize>>, SampleSizeError> {
    let mut ids: BTreeMap<usize, usize> = BTreeMap::new();
    for s in sets.iter().flatten() {
        let next = ids.len();
        ids.entry(*s).or_insert(next);
    }
    if ids.len() > d_alpha_size {
        return Err(SampleSizeError::AssumptionViolated {
            r_bar: ids.len(),
            d_alpha_size,
        });
    }
    Ok(sets.iter().map(|set| set.iter().map(|s| ids[s]).collect()).collect())
}

/// Fraction of `trials` uniform `z`-subsets of `0..d_alpha_size` that
/// contain some member of `sets` entirely. Identical for any thread count.
pub fn monte_carlo_rho_sets(
    sets: &[Vec<usize>],
    d_alpha_size: usize,
    z: usize,
    trials: u64,
    seed: u64,
) -> Result<f64, SampleSizeError> {
    if z > d_alpha_size {
        return Err(SampleSizeError::ZTooLarge {
            z,
            available: d_alpha_size,
        });
    }
    if trials == 0 {
        return Err(SampleSizeError::Invalid("trials must be positive".into()));
    }
    let sets = compact_sets(sets, d_alpha_size)?;
    if sets.is_empty() {
        return Ok(1.0);
    }
    let batches = trials.div_ceil(MC_BATCH);
    let hits: u64 = (0..batches)
        .into_par_iter()
        .map(|b| {
            let n = MC_BATCH.min(trials - b * MC_BATCH);
            let mut rng = seeded(mix(seed, b));
            let mut items: Vec<usize> = (0..d_alpha_size).collect();
            let mut chosen = vec![false; d_alpha_size];
            let mut hits = 0u64;
            for _ in 0..n {
                shuffle_prefix(&mut items, z, &mut rng);
                chosen.iter_mut().for_each(|c| *c = false);
                for &i in &items[..z] {
                    chosen[i] = true;
                }
                if sets.iter().any(|s| s.iter().all(|&i| chosen[i])) {
                    hits += 1;
                }
            }
            hits
        })
        .sum();
    Ok(hits as f64 / trials as f64)
}

pub fn monte_carlo_rho(family: &SddsFamily, d_alpha_size: usize, z: usize, trials: u64, seed: u64) -> Result<f64, SampleSizeError> {
    monte_carlo_rho_sets(&family.sets, d_alpha_size, z, trials, seed)
}

/// `z` distinct scenarios of `d_alpha`, uniformly without replacement.
pub fn draw_d_emb(d_alpha: &DataSet, z: usize, seed: u64) -> Result<DataSet, SampleSizeError> {
    let u = underlying_set(d_alpha)?;
    let idx = draw_indices(u.len(), z, seed)?;
    Ok(d_alpha.with_points(idx.into_iter().map(|i| u.scenarios[i].clone()).collect()))
}

/// Indices into `U[d_alpha]` of the scenarios `draw_d_emb` picks.
pub fn draw_indices(available: usize, z: usize, seed: u64) -> Result<Vec<usize>, SampleSizeError> {
    if z > available {
        return Err(SampleSizeError::ZTooLarge { z, available });
    }
    let mut idx: Vec<usize> = (0..available).collect();
    shuffle_prefix(&mut idx, z, &mut seeded(seed));
    idx.truncate(z);
    Ok(idx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(n: i64, d: i64) -> BigRational {
        BigRational::new(n.into(), d.into())
    }

    #[test]
    fn single_point_family_is_linear() {
        let input = RhoInput::new(10, vec![(1, 1)]).unwrap();
        for z in 0..=10 {
            assert_eq!(rho_exact(&input, z).unwrap(), q(z as i64, 10));
        }
        assert_eq!(rho(&input, 5).unwrap(), 0.5);
    }

    #[test]
    fn disjoint_singletons_at_one() {
        let input = RhoInput::new(10, vec![(1, 1), (1, 1), (2, 2)]).unwrap();
        assert_eq!(rho_exact(&input, 1).unwrap(), q(1, 5));
    }

    #[test]
    fn full_draw_is_certain() {
        let input = RhoInput::new(12, vec![(1, 3), (1, 3), (2, 4)]).unwrap();
        assert_eq!(rho_exact(&input, 12).unwrap(), BigRational::one());
    }

    #[test]
    fn table_matches_pointwise() {
        let input = RhoInput::new(9, vec![(1, 2), (1, 3), (1, 1), (2, 4), (2, 3), (2, 4), (3, 5)]).unwrap();
        let table = rho_table_exact(&input).unwrap();
        for (z, r) in table.iter().enumerate() {
            assert_eq!(*r, rho_exact(&input, z).unwrap());
        }
    }

    #[test]
    fn assumption_and_shape_checks() {
        assert!(matches!(
            RhoInput::new(3, vec![(1, 4)]),
            Err(SampleSizeError::AssumptionViolated { .. })
        ));
        assert!(RhoInput::new(5, vec![(1, 1), (1, 1)]).is_err());
        assert!(RhoInput::new(5, vec![(3, 1), (1, 1), (1, 1)]).is_err());
        assert!(matches!(
            rho(&RhoInput::new(5, vec![(1, 1)]).unwrap(), 6),
            Err(SampleSizeError::ZTooLarge { .. })
        ));
    }

    #[test]
    fn min_z_examples() {
        let input = RhoInput::new(10, vec![(1, 1)]).unwrap();
        assert_eq!(min_z(&input, 0.5).unwrap(), MinZ { z: 5, monotone: true });
        assert_eq!(min_z(&input, 1.0).unwrap().z, 10);
        let pair = RhoInput::new(10, vec![(1, 3), (1, 2), (2, 5)]).unwrap();
        assert_eq!(min_z(&pair, 1e-12).unwrap().z, 2);
        assert!(min_z(&input, 0.0).is_err());
    }

    #[test]
    fn empty_family_needs_nothing() {
        let input = RhoInput::new(4, vec![]).unwrap();
        assert_eq!(min_z(&input, 1.0).unwrap().z, 0);
        assert_eq!(rho(&input, 0).unwrap(), 1.0);
    }

    #[test]
    fn binomial_edges() {
        assert_eq!(binomial(5, -1), BigUint::zero());
        assert_eq!(binomial(5, 6), BigUint::zero());
        assert_eq!(binomial(0, 0), BigUint::one());
        assert_eq!(binomial(52, 5), BigUint::from(2_598_960u32));
    }

    #[test]
    fn monte_carlo_edges_and_determinism() {
        let sets = vec![vec![7usize]];
        assert_eq!(monte_carlo_rho_sets(&sets, 10, 0, 100, 1).unwrap(), 0.0);
        assert_eq!(monte_carlo_rho_sets(&sets, 10, 10, 100, 1).unwrap(), 1.0);
        let a = monte_carlo_rho_sets(&sets, 10, 5, 20_000, 9).unwrap();
        let b = monte_carlo_rho_sets(&sets, 10, 5, 20_000, 9).unwrap();
        assert_eq!(a, b);
        assert!((a - 0.5).abs() < 0.02, "{a}");
    }

    #[test]
    fn draw_is_deterministic_and_distinct() {
        let rows: Vec<[f64; 1]> = (0..6).map(|i| [i as f64]).collect();
        let mut refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        refs.extend(refs.clone());
        let d = DataSet::from_rows(&refs).unwrap();
        let a = draw_d_emb(&d, 4, 3).unwrap();
        assert_eq!(a, draw_d_emb(&d, 4, 3).unwrap());
        assert_eq!(underlying_set(&a).unwrap().len(), 4);
        let all = draw_d_emb(&d, 6, 1).unwrap();
        let mut v: Vec<f64> = all.points().iter().map(|p| p.values[0]).collect();
        v.sort_by(f64::total_cmp);
        assert_eq!(v, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        assert!(matches!(draw_d_emb(&d, 7, 0), Err(SampleSizeError::ZTooLarge { .. })));
    }
}
