use std::collections::BTreeSet;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataPoint, ScenarioSet};
use crate::dep::{solutions_equal, solve, DepError, DepInstance, GridCache, Solution, SolverConfig, SolverId};
use crate::expr::{BinOp, Node, Var};
use crate::problem::ProblemSpec;

/// Exhaustive enumeration refuses more scenarios than this.
pub const MAX_ENUMERATION: usize = 15;
/// Largest family whose full union table is built.
pub const MAX_FAMILY: usize = 20;
const MAX_BFDS_SCENARIOS: usize = 64;
const MAX_BFDS_DIM: usize = 3;
const MAX_CERTIFY_CANDIDATES: usize = 20;

#[derive(Debug, Error)]
pub enum SddsError {
    #[error("{got} scenarios exceed the limit of {limit}")]
    TooManyScenarios { got: usize, limit: usize },
    #[error("probe grids support n ≤ {MAX_BFDS_DIM}, got {0}")]
    DimensionTooLarge(usize),
    #[error("solve failed on subset {subset:?}: {source}")]
    SolveFailure {
        subset: Vec<usize>,
        #[source]
        source: DepError,
    },
    #[error("the SDDS family is empty")]
    FamilyEmpty,
    #[error("family of {0} sets is too large for the union table")]
    FamilyTooLarge(usize),
    #[error("family was computed under a different solver configuration")]
    FingerprintMismatch,
    #[error("invalid probe settings: {0}")]
    InvalidProbe(String),
    #[error(transparent)]
    Dep(#[from] DepError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeSettings {
    pub points_per_axis: usize,
    pub feas_tol: f64,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        ProbeSettings {
            points_per_axis: 21,
            feas_tol: 1e-8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BfdsWarning {
    /// The probe grid and its refinement (2N − 1 points per axis) disagree.
    ProbeTooCoarse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BfdsResult {
    pub bfds: Vec<usize>,
    pub probe_points: Vec<Vec<f64>>,
    pub certified: bool,
    /// False when another subset of the same size also reproduces the feasible set.
    pub unique: bool,
    pub warnings: Vec<BfdsWarning>,
}

fn probe_grid(bounds: &[(f64, f64)], per_axis: usize) -> Vec<Vec<f64>> {
    let axes: Vec<Vec<f64>> = bounds
        .iter()
        .map(|&(lo, hi)| {
            (0..per_axis)
                .map(|i| lo + (hi - lo) * i as f64 / (per_axis - 1) as f64)
                .collect()
        })
        .collect();
    let mut points = vec![Vec::new()];
    for axis in &axes {
        points = points
            .into_iter()
            .flat_map(|p| {
                axis.iter().map(move |&v| {
                    let mut q = p.clone();
                    q.push(v);
                    q
                })
            })
            .collect();
    }
    points
}

/// Bitmask of scenarios that violate some constraint at each probe.
fn probe_violators(spec: &ProblemSpec, full: &ScenarioSet, probes: &[Vec<f64>], tol: f64) -> Vec<u64> {
    probes
        .par_iter()
        .map(|x| {
            let mut mask = 0u64;
            for (s, xi) in full.scenarios.iter().enumerate() {
                let bad = spec.constraints.iter().any(|c| !matches!(c.eval(x, &xi.values), Ok(g) if g <= tol));
                if bad {
                    mask |= 1 << s;
                }
            }
            mask
        })
        .collect()
}

fn same_classification(violators: &[u64], keep: u64, all: u64) -> bool {
    violators.iter().all(|&v| (v & keep == 0) == (v & all == 0))
}

fn mask_indices(mask: u64) -> Vec<usize> {
    (0..64).filter(|i| mask >> i & 1 == 1).collect()
}

fn all_mask(k: usize) -> u64 {
    if k == 64 {
        u64::MAX
    } else {
        (1u64 << k) - 1
    }
}

/// Greedy backward elimination, later scenarios first, to a fixed point.
fn eliminate(violators: &[u64], k: usize) -> u64 {
    let all = all_mask(k);
    let mut keep = all;
    loop {
        let mut changed = false;
        for s in (0..k).rev() {
            if keep >> s & 1 == 0 {
                continue;
            }
            let trial = keep & !(1 << s);
            if same_classification(violators, trial, all) {
                keep = trial;
                changed = true;
            }
        }
        if !changed {
            return keep;
        }
    }
}

/// Whether swapping one kept scenario for one dropped scenario also works.
fn swap_exists(violators: &[u64], keep: u64, k: usize) -> bool {
    let all = all_mask(k);
    mask_indices(keep).into_iter().any(|a| {
        (0..k)
            .filter(|&b| keep >> b & 1 == 0)
            .any(|b| same_classification(violators, (keep & !(1 << a)) | (1 << b), all))
    })
}

enum Bound {
    Lower { x: usize, xi: usize },
    Upper { x: usize, xi: usize },
}

fn bound_form(node: &Node) -> Option<Bound> {
    match node {
        Node::Bin(BinOp::Sub, a, b) => match (a.as_ref(), b.as_ref()) {
            (Node::Var(Var::Xi(k)), Node::Var(Var::X(i))) => Some(Bound::Lower { x: *i, xi: *k }),
            (Node::Var(Var::X(i)), Node::Var(Var::Xi(k))) => Some(Bound::Upper { x: *i, xi: *k }),
            _ => None,
        },
        _ => None,
    }
}

/// Exact minimum for pure bound constraints. `None` when the form does not
/// apply, the feasible set is empty, or there are too many tied candidates.
fn certified_bfds(spec: &ProblemSpec, full: &ScenarioSet) -> Option<(u64, bool)> {
    let forms: Vec<Bound> = spec.constraints.iter().map(|c| bound_form(c.root())).collect::<Option<_>>()?;
    // per variable: tightest lower and upper bound and who attains them
    let n = spec.n;
    let mut groups: Vec<u64> = Vec::new();
    for i in 0..n {
        let (lo, hi) = spec.bounds[i];
        let mut lower: Option<(f64, u64)> = None;
        let mut upper: Option<(f64, u64)> = None;
        for form in &forms {
            for (s, xi) in full.scenarios.iter().enumerate() {
                match *form {
                    Bound::Lower { x, xi: k } if x == i => {
                        let v = xi.values[k];
                        lower = Some(match lower {
                            Some((b, m)) if b > v => (b, m),
                            Some((b, m)) if b == v => (b, m | 1 << s),
                            _ => (v, 1 << s),
                        });
                    }
                    Bound::Upper { x, xi: k } if x == i => {
                        let v = xi.values[k];
                        upper = Some(match upper {
                            Some((b, m)) if b < v => (b, m),
                            Some((b, m)) if b == v => (b, m | 1 << s),
                            _ => (v, 1 << s),
                        });
                    }
                    _ => {}
                }
            }
        }
        let l = lower.map_or(lo, |(b, _)| b.max(lo));
        let u = upper.map_or(hi, |(b, _)| b.min(hi));
        if l > u {
            return None;
        }
        if let Some((_, m)) = lower.filter(|&(b, _)| b > lo) {
            groups.push(m);
        }
        if let Some((_, m)) = upper.filter(|&(b, _)| b < hi) {
            groups.push(m);
        }
    }
    let candidates = mask_indices(groups.iter().fold(0, |a, g| a | g));
    if candidates.len() > MAX_CERTIFY_CANDIDATES {
        return None;
    }
    let expand = |sub: u64| -> u64 {
        candidates
            .iter()
            .enumerate()
            .filter(|(j, _)| sub >> j & 1 == 1)
            .fold(0, |a, (_, &s)| a | 1 << s)
    };
    for size in 0..=candidates.len() {
        let hits: Vec<u64> = (0..1u64 << candidates.len())
            .filter(|m| m.count_ones() as usize == size)
            .map(expand)
            .filter(|&m| groups.iter().all(|g| g & m != 0))
            .collect();
        if let Some(&first) = hits.first() {
            return Some((first, hits.len() == 1));
        }
    }
    None
}

/// Smallest subset of `full` inducing the same feasible set, tested on a probe grid.
pub fn find_bfds(spec: &ProblemSpec, full: &ScenarioSet, probe: &ProbeSettings) -> Result<BfdsResult, SddsError> {
    if spec.n > MAX_BFDS_DIM {
        return Err(SddsError::DimensionTooLarge(spec.n));
    }
    if full.len() > MAX_BFDS_SCENARIOS {
        return Err(SddsError::TooManyScenarios {
            got: full.len(),
            limit: MAX_BFDS_SCENARIOS,
        });
    }
    if probe.points_per_axis < 2 {
        return Err(SddsError::InvalidProbe("need at least 2 points per axis".into()));
    }
    let k = full.len();
    let probes = probe_grid(&spec.bounds, probe.points_per_axis);
    let violators = probe_violators(spec, full, &probes, probe.feas_tol);

    if let Some((mask, unique)) = certified_bfds(spec, full) {
        return Ok(BfdsResult {
            bfds: mask_indices(mask),
            probe_points: probes,
            certified: true,
            unique,
            warnings: Vec::new(),
        });
    }

    let keep = eliminate(&violators, k);
    let fine = probe_grid(&spec.bounds, 2 * probe.points_per_axis - 1);
    let fine_keep = eliminate(&probe_violators(spec, full, &fine, probe.feas_tol), k);
    let mut warnings = Vec::new();
    if fine_keep != keep {
        warnings.push(BfdsWarning::ProbeTooCoarse);
    }
    Ok(BfdsResult {
        bfds: mask_indices(keep),
        unique: !swap_exists(&violators, keep, k),
        probe_points: probes,
        certified: false,
        warnings,
    })
}

/// `R̄_j` for one nonempty subset `𝒥_j` of family indices.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RBarEntry {
    pub subset: Vec<usize>,
    pub r_bar: usize,
}

/// All SDDSs of one scenario set under one solver configuration. Indices
/// are 0-based positions in `scenarios`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SddsFamily {
    pub scenarios: Vec<Vec<f64>>,
    pub sets: Vec<Vec<usize>>,
    pub r_bar: Vec<RBarEntry>,
    pub reference_x: Vec<f64>,
    /// Solver configuration with the start resolved.
    pub fingerprint: SolverConfig,
}

impl SddsFamily {
    /// Builds a family from explicit sets, without any solving.
    pub fn from_sets(scenarios: Vec<Vec<f64>>, sets: Vec<Vec<usize>>, fingerprint: SolverConfig) -> Result<Self, SddsError> {
        let r_bar = union_table(&sets)?;
        Ok(SddsFamily {
            scenarios,
            sets,
            r_bar,
            reference_x: Vec::new(),
            fingerprint,
        })
    }

    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    pub fn fingerprint_matches(&self, spec: &ProblemSpec, cfg: &SolverConfig) -> Result<bool, DepError> {
        Ok(self.fingerprint == resolved(spec, cfg)?)
    }

    pub fn check_fingerprint(&self, spec: &ProblemSpec, cfg: &SolverConfig) -> Result<(), SddsError> {
        if self.fingerprint_matches(spec, cfg)? {
            Ok(())
        } else {
            Err(SddsError::FingerprintMismatch)
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("family serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, SddsError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SddsError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), SddsError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }
}

fn resolved(spec: &ProblemSpec, cfg: &SolverConfig) -> Result<SolverConfig, DepError> {
    let mut fp = cfg.clone();
    fp.start = Some(cfg.start_for(spec)?);
    Ok(fp)
}

/// Nonempty index subsets of `0..r`, by size then lexicographically.
pub fn index_subsets(r: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = (1u64..1 << r).map(mask_indices).collect();
    out.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
    out
}

fn union_table(sets: &[Vec<usize>]) -> Result<Vec<RBarEntry>, SddsError> {
    if sets.len() > MAX_FAMILY {
        return Err(SddsError::FamilyTooLarge(sets.len()));
    }
    Ok(index_subsets(sets.len())
        .into_iter()
        .map(|subset| {
            let union: BTreeSet<usize> = subset.iter().flat_map(|&i| sets[i].iter().copied()).collect();
            RBarEntry {
                r_bar: union.len(),
                subset,
            }
        })
        .collect())
}

/// `(J_j, R̄_j)` in the order of `family.r_bar`.
pub fn r_bar_vector(family: &SddsFamily) -> Result<Vec<RBarEntry>, SddsError> {
    if family.is_empty() {
        return Err(SddsError::FamilyEmpty);
    }
    Ok(family.r_bar.clone())
}

/// Subset masks of `0..k` by popcount, then numerically.
fn masks_by_size(k: usize) -> Vec<u64> {
    let mut masks: Vec<u64> = (0..1u64 << k).collect();
    masks.sort_by_key(|&m| (m.count_ones(), m));
    masks
}

/// Solves DEP on every subset of `full` and returns the minimal subsets
/// that reproduce the full solution. Subset solves run in parallel.
pub fn enumerate_sdds(spec: &ProblemSpec, full: &ScenarioSet, cfg: &SolverConfig) -> Result<SddsFamily, SddsError> {
    let k = full.len();
    if k > MAX_ENUMERATION {
        return Err(SddsError::TooManyScenarios {
            got: k,
            limit: MAX_ENUMERATION,
        });
    }
    let fingerprint = resolved(spec, cfg)?;
    let spec = Arc::new(spec.clone());
    let full_inst = DepInstance::from_scenarios(Arc::clone(&spec), full.clone())?;
    let cache = match cfg.solver_id {
        SolverId::GridOracle => Some(GridCache::build(&full_inst, cfg)?),
        _ => None,
    };
    let solve_mask = |mask: u64| -> Result<Solution, SddsError> {
        let idx = mask_indices(mask);
        let fail = |source| SddsError::SolveFailure {
            subset: idx.clone(),
            source,
        };
        let sub = DepInstance::from_scenarios(Arc::clone(&spec), full.select(&idx)).map_err(fail)?;
        let sol = match &cache {
            Some(c) => c.solve_subset(&sub, mask, cfg),
            None => solve(&sub, cfg),
        };
        sol.and_then(Solution::ensure_optimal).map_err(fail)
    };
    let all = all_mask(k);
    let reference = solve_mask(all)?;
    let reproduces: Vec<bool> = (0..1u64 << k)
        .into_par_iter()
        .map(|m| solve_mask(m).map(|s| solutions_equal(&s, &reference, cfg.sol_tol)))
        .collect::<Result<_, _>>()?;
    let sets: Vec<Vec<usize>> = masks_by_size(k)
        .into_iter()
        .filter(|&m| m != 0 && reproduces[m as usize])
        .filter(|&m| mask_indices(m).into_iter().all(|p| !reproduces[(m & !(1 << p)) as usize]))
        .map(mask_indices)
        .collect();
    let r_bar = union_table(&sets)?;
    Ok(SddsFamily {
        scenarios: full.scenarios.iter().map(|p| p.values.clone()).collect(),
        sets,
        r_bar,
        reference_x: reference.x_star,
        fingerprint,
    })
}

/// Scenario values of one family member.
pub fn member_points(family: &SddsFamily, i: usize) -> Vec<DataPoint> {
    family.sets[i]
        .iter()
        .map(|&s| DataPoint::new(family.scenarios[s].clone()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{underlying_set, DataSet};

    fn spec(text: &str) -> ProblemSpec {
        ProblemSpec::from_json(text).unwrap()
    }

    fn scen(rows: &[&[f64]]) -> ScenarioSet {
        underlying_set(&DataSet::from_rows(rows).unwrap()).unwrap()
    }

    const ONE_D: &str = r#"{"n":1,"u":1,"objective":"x1","constraints":["xi1 - x1"],"bounds":[[-10,10]],"start":[0]}"#;

    #[test]
    fn bfds_of_lower_bound_is_the_max() {
        let r = find_bfds(&spec(ONE_D), &scen(&[&[1.0], &[3.0], &[2.0]]), &ProbeSettings::default()).unwrap();
        assert_eq!(r.bfds, vec![1]);
        assert!(r.certified && r.unique);
    }

    #[test]
    fn bfds_single_vacuous_scenario_is_empty() {
        let r = find_bfds(&spec(ONE_D), &scen(&[&[-20.0]]), &ProbeSettings::default()).unwrap();
        assert!(r.bfds.is_empty());
        let r = find_bfds(&spec(ONE_D), &scen(&[&[2.0]]), &ProbeSettings::default()).unwrap();
        assert_eq!(r.bfds, vec![0]);
    }

    #[test]
    fn bfds_duplicate_geometry_keeps_first() {
        let s = spec(r#"{"n":1,"u":2,"objective":"x1","constraints":["xi1 - x1"],"bounds":[[-10,10]],"start":[0]}"#);
        let full = scen(&[&[3.0, 0.0], &[3.0, 5.0], &[1.0, 1.0]]);
        let r = find_bfds(&s, &full, &ProbeSettings::default()).unwrap();
        assert_eq!(r.bfds, vec![0]);
        assert!(!r.unique);
    }

    #[test]
    fn bfds_probe_path_for_general_constraints() {
        // x1 + x2 ≥ ξ1 · 1 on a box: only the largest ξ1 matters
        let s = spec(r#"{"n":2,"u":1,"objective":"x1","constraints":["xi1 - x1 - x2"],"bounds":[[-5,5],[-5,5]],"start":[0,0]}"#);
        let full = scen(&[&[1.0], &[2.0], &[0.5]]);
        let r = find_bfds(&s, &full, &ProbeSettings::default()).unwrap();
        assert!(!r.certified);
        assert_eq!(r.bfds, vec![1]);
        assert!(r.warnings.is_empty());
        let all = all_mask(full.len());
        let keep = r.bfds.iter().fold(0u64, |a, &i| a | 1 << i);
        let v = probe_violators(&s, &full, &r.probe_points, 1e-8);
        assert!(same_classification(&v, keep, all));
    }

    #[test]
    fn bfds_flags_coarse_probes() {
        // the two bounds differ by less than one probe spacing
        let s = spec(r#"{"n":1,"u":1,"objective":"x1","constraints":["xi1 - x1*x1"],"bounds":[[0,4]],"start":[0]}"#);
        let full = scen(&[&[1.0], &[1.1]]);
        let r = find_bfds(&s, &full, &ProbeSettings { points_per_axis: 3, feas_tol: 1e-8 }).unwrap();
        assert_eq!(r.warnings, vec![BfdsWarning::ProbeTooCoarse]);
    }

    #[test]
    fn enumerate_single_binding_point() {
        let s = spec(ONE_D);
        let f = enumerate_sdds(&s, &scen(&[&[1.0], &[3.0], &[2.0]]), &SolverConfig::default()).unwrap();
        assert_eq!(f.sets, vec![vec![1]]);
        assert_eq!(f.r_bar, vec![RBarEntry { subset: vec![0], r_bar: 1 }]);
        assert!((f.reference_x[0] - 3.0).abs() < 1e-6);
    }

    #[test]
    fn interior_optimum_gives_empty_family() {
        let s = spec(r#"{"n":1,"u":1,"objective":"(x1 - 5)^2","constraints":["xi1 - x1"],"bounds":[[-10,10]],"start":[0]}"#);
        let f = enumerate_sdds(&s, &scen(&[&[1.0], &[2.0]]), &SolverConfig::with_solver(SolverId::GridOracle)).unwrap();
        assert!(f.is_empty());
        assert!(matches!(r_bar_vector(&f), Err(SddsError::FamilyEmpty)));
    }

    #[test]
    fn enumeration_refuses_large_sets() {
        let rows: Vec<[f64; 1]> = (0..16).map(|i| [i as f64]).collect();
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let err = enumerate_sdds(&spec(ONE_D), &scen(&refs), &SolverConfig::default()).unwrap_err();
        assert!(matches!(err, SddsError::TooManyScenarios { got: 16, .. }));
    }

    #[test]
    fn tied_maxima_give_two_sets() {
        let s = spec(ONE_D);
        let cfg = SolverConfig::with_solver(SolverId::GridOracle);
        let f = enumerate_sdds(&s, &scen(&[&[3.0], &[1.0]]), &cfg).unwrap();
        assert_eq!(f.sets, vec![vec![0]]);
        let two = spec(r#"{"n":1,"u":2,"objective":"x1","constraints":["xi1 - x1"],"bounds":[[-10,10]],"start":[0]}"#);
        let f = enumerate_sdds(&two, &scen(&[&[3.0, 0.0], &[3.0, 1.0], &[1.0, 0.0]]), &cfg).unwrap();
        assert_eq!(f.sets, vec![vec![0], vec![1]]);
        assert_eq!(f.r_bar.iter().map(|e| e.r_bar).collect::<Vec<_>>(), vec![1, 1, 2]);
    }

    #[test]
    fn union_table_arithmetic() {
        let t = union_table(&[vec![0, 1], vec![1, 2]]).unwrap();
        let flat: Vec<(Vec<usize>, usize)> = t.into_iter().map(|e| (e.subset, e.r_bar)).collect();
        assert_eq!(flat, vec![(vec![0], 2), (vec![1], 2), (vec![0, 1], 3)]);
        assert_eq!(union_table(&[vec![0], vec![1], vec![2]]).unwrap().len(), 7);
    }

    #[test]
    fn fingerprint_round_trip() {
        let s = spec(ONE_D);
        let cfg = SolverConfig::default();
        let f = enumerate_sdds(&s, &scen(&[&[1.0], &[3.0]]), &cfg).unwrap();
        let back = SddsFamily::from_json(&f.to_json()).unwrap();
        assert_eq!(back, f);
        back.check_fingerprint(&s, &cfg).unwrap();
        let mut other = cfg.clone();
        other.sol_tol = 1e-3;
        assert!(matches!(back.check_fingerprint(&s, &other), Err(SddsError::FingerprintMismatch)));
    }
}
