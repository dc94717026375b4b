//! Finite data-embedded programs: one constraint block per embedded scenario,
//! a feasibility test, and two deterministic backends (a quadratic-penalty
//! projected-gradient solver and an exhaustive grid oracle for n ≤ 2).

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{underlying_set, DataError, DataSet, ScenarioSet};
use crate::expr::{EvalError, Expression};
use crate::problem::ProblemSpec;

#[derive(Debug, Error)]
pub enum DepError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("embedded data has dimension {got}, problem expects u = {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("embedded data set is empty")]
    EmptyEmbedding,
    #[error("invalid solver configuration: {0}")]
    Config(String),
    #[error("grid oracle supports n ≤ 2, problem has n = {0}")]
    GridOracleDimension(usize),
    #[error("`abs` in the problem needs `abs_smoothing` for the gradient-based solver")]
    AbsNotSmoothed,
    #[error("no external solver backend is bundled")]
    NoExternalBackend,
    #[error("no feasible point found (max violation {max_violation})")]
    Infeasible { max_violation: f64 },
    #[error("iteration limit reached (max violation {max_violation})")]
    MaxIterations { max_violation: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolverId {
    BuiltinPenalty,
    GridOracle,
    External,
}

impl SolverId {
    pub fn as_str(self) -> &'static str {
        match self {
            SolverId::BuiltinPenalty => "builtin-penalty",
            SolverId::GridOracle => "grid-oracle",
            SolverId::External => "external",
        }
    }

    pub fn parse(s: &str) -> Option<SolverId> {
        match s {
            "builtin-penalty" => Some(SolverId::BuiltinPenalty),
            "grid-oracle" => Some(SolverId::GridOracle),
            "external" => Some(SolverId::External),
            _ => None,
        }
    }
}

/// Everything that must be held fixed for solutions to be comparable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub solver_id: SolverId,
    /// Overrides the problem's start point when set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub start: Option<Vec<f64>>,
    pub feas_tol: f64,
    pub sol_tol: f64,
    pub act_tol: f64,
    pub max_inner_iterations: usize,
    pub penalty_rounds: usize,
    pub mu0: f64,
    pub mu_growth: f64,
    pub initial_step: f64,
    pub step_shrink: f64,
    pub grid_resolution: usize,
    pub refine_factor: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub abs_smoothing: Option<f64>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            solver_id: SolverId::BuiltinPenalty,
            start: None,
            feas_tol: 1e-8,
            sol_tol: 1e-6,
            act_tol: 1e-6,
            max_inner_iterations: 20_000,
            penalty_rounds: 12,
            mu0: 1.0,
            mu_growth: 10.0,
            initial_step: 1.0,
            step_shrink: 0.5,
            grid_resolution: 2001,
            refine_factor: 10,
            abs_smoothing: None,
        }
    }
}

impl SolverConfig {
    pub fn with_solver(solver_id: SolverId) -> Self {
        SolverConfig {
            solver_id,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), DepError> {
        let positive = [
            ("feas_tol", self.feas_tol),
            ("sol_tol", self.sol_tol),
            ("act_tol", self.act_tol),
            ("mu0", self.mu0),
            ("initial_step", self.initial_step),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(DepError::Config(format!("{name} must be positive")));
            }
        }
        if !(self.mu_growth > 1.0) {
            return Err(DepError::Config("mu_growth must exceed 1".into()));
        }
        if !(self.step_shrink > 0.0 && self.step_shrink < 1.0) {
            return Err(DepError::Config("step_shrink must lie in (0, 1)".into()));
        }
        if self.grid_resolution < 2 || self.refine_factor < 1 {
            return Err(DepError::Config("grid_resolution ≥ 2 and refine_factor ≥ 1".into()));
        }
        if self.penalty_rounds == 0 || self.max_inner_iterations == 0 {
            return Err(DepError::Config("iteration caps must be ≥ 1".into()));
        }
        if matches!(self.abs_smoothing, Some(e) if !(e > 0.0)) {
            return Err(DepError::Config("abs_smoothing must be positive".into()));
        }
        Ok(())
    }

    /// Start point in effect for `spec`.
    pub fn start_for(&self, spec: &ProblemSpec) -> Result<Vec<f64>, DepError> {
        let start = self.start.clone().unwrap_or_else(|| spec.start.clone());
        if !spec.in_bounds(&start) {
            return Err(DepError::Config(format!("start {start:?} outside the bounds box")));
        }
        Ok(start)
    }
}

/// A DEP over a deduplicated embedded scenario set. Constraint rows are
/// ordered constraint-major, then by scenario insertion order.
#[derive(Clone, Debug)]
pub struct DepInstance {
    spec: Arc<ProblemSpec>,
    embedded: ScenarioSet,
}

impl DepInstance {
    /// Unchecked for emptiness: an empty scenario set gives the box-only problem.
    pub fn from_scenarios(spec: Arc<ProblemSpec>, embedded: ScenarioSet) -> Result<Self, DepError> {
        if let Some(s) = embedded.scenarios.iter().find(|s| s.dim() != spec.u) {
            return Err(DepError::DimensionMismatch {
                expected: spec.u,
                got: s.dim(),
            });
        }
        Ok(DepInstance { spec, embedded })
    }

    pub fn spec(&self) -> &ProblemSpec {
        &self.spec
    }

    pub fn shared_spec(&self) -> Arc<ProblemSpec> {
        Arc::clone(&self.spec)
    }

    pub fn embedded(&self) -> &ScenarioSet {
        &self.embedded
    }

    pub fn constraint_count(&self) -> usize {
        self.spec.m() * self.embedded.len()
    }

    /// `(constraint index, scenario index)` per row.
    pub fn rows(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let k = self.embedded.len();
        (0..self.spec.m()).flat_map(move |c| (0..k).map(move |s| (c, s)))
    }

    pub fn constraint_values(&self, x: &[f64]) -> Result<Vec<f64>, EvalError> {
        self.rows()
            .map(|(c, s)| self.spec.constraints[c].eval(x, &self.embedded.scenarios[s].values))
            .collect()
    }

    /// `max(0, max_k g_k(x))`.
    pub fn max_violation(&self, x: &[f64]) -> Result<f64, EvalError> {
        Ok(self
            .constraint_values(x)?
            .into_iter()
            .fold(0.0, f64::max))
    }

    fn active_points(&self, x: &[f64], tol: f64) -> Vec<usize> {
        let mut active = vec![false; self.embedded.len()];
        for (c, s) in self.rows() {
            if let Ok(g) = self.spec.constraints[c].eval(x, &self.embedded.scenarios[s].values) {
                if g.abs() <= tol {
                    active[s] = true;
                }
            }
        }
        active
            .iter()
            .enumerate()
            .filter_map(|(i, &a)| a.then_some(i))
            .collect()
    }
}

/// Deduplicates `emb` and embeds one constraint block per distinct scenario.
pub fn build_dep(spec: &ProblemSpec, emb: &DataSet) -> Result<DepInstance, DepError> {
    if emb.dim() != spec.u {
        return Err(DepError::DimensionMismatch {
            expected: spec.u,
            got: emb.dim(),
        });
    }
    if emb.is_empty() {
        return Err(DepError::EmptyEmbedding);
    }
    DepInstance::from_scenarios(Arc::new(spec.clone()), underlying_set(emb)?)
}

/// Every materialized constraint is `≤ tol` at `x` (inclusive).
pub fn is_feasible(inst: &DepInstance, x: &[f64], tol: f64) -> Result<bool, EvalError> {
    for (c, s) in inst.rows() {
        if inst.spec.constraints[c].eval(x, &inst.embedded.scenarios[s].values)? > tol {
            return Ok(false);
        }
    }
    Ok(true)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    Optimal,
    Infeasible,
    MaxIterations,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Solution {
    pub x_star: Vec<f64>,
    pub objective_value: f64,
    pub status: Status,
    /// Indices into the instance's embedded scenarios.
    pub active_data_points: Vec<usize>,
    pub solver_id: String,
    pub start: Vec<f64>,
    pub iterations: usize,
    pub max_violation: f64,
}

impl Solution {
    pub fn ensure_optimal(self) -> Result<Solution, DepError> {
        match self.status {
            Status::Optimal => Ok(self),
            Status::Infeasible => Err(DepError::Infeasible {
                max_violation: self.max_violation,
            }),
            Status::MaxIterations => Err(DepError::MaxIterations {
                max_violation: self.max_violation,
            }),
        }
    }
}

/// `‖a − b‖∞ ≤ tol`.
pub fn solutions_equal(a: &Solution, b: &Solution, tol: f64) -> bool {
    a.x_star.len() == b.x_star.len()
        && a.x_star
            .iter()
            .zip(&b.x_star)
            .all(|(p, q)| (p - q).abs() <= tol)
}

/// Solution plus the configuration that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub solution: Solution,
    pub config: SolverConfig,
}

/// Pluggable DEP backend.
pub trait DepBackend: Sync {
    fn id(&self) -> &'static str;
    fn solve(&self, inst: &DepInstance, cfg: &SolverConfig, start: &[f64]) -> Result<Solution, DepError>;
}

pub struct PenaltyBackend;
pub struct GridOracleBackend;

/// Solves with the backend named in `cfg`. Pure in `(inst, cfg)`.
pub fn solve(inst: &DepInstance, cfg: &SolverConfig) -> Result<Solution, DepError> {
    match cfg.solver_id {
        SolverId::BuiltinPenalty => solve_with(&PenaltyBackend, inst, cfg),
        SolverId::GridOracle => solve_with(&GridOracleBackend, inst, cfg),
        SolverId::External => Err(DepError::NoExternalBackend),
    }
}

pub fn solve_with(backend: &dyn DepBackend, inst: &DepInstance, cfg: &SolverConfig) -> Result<Solution, DepError> {
    cfg.validate()?;
    let start = cfg.start_for(inst.spec())?;
    backend.solve(inst, cfg, &start)
}

fn finish(
    inst: &DepInstance,
    cfg: &SolverConfig,
    solver_id: &str,
    start: &[f64],
    x: Vec<f64>,
    status: Status,
    iterations: usize,
) -> Solution {
    let objective_value = inst.spec.objective.eval(&x, &[]).unwrap_or(f64::NAN);
    let max_violation = inst.max_violation(&x).unwrap_or(f64::INFINITY);
    Solution {
        active_data_points: inst.active_points(&x, cfg.act_tol),
        objective_value,
        status,
        solver_id: solver_id.to_owned(),
        start: start.to_vec(),
        iterations,
        max_violation,
        x_star: x,
    }
}

// ---------------------------------------------------------------------------
// quadratic penalty, projected gradient

struct Penalized<'a> {
    inst: &'a DepInstance,
    objective: Expression,
    constraints: Vec<Expression>,
    mu: f64,
}

impl Penalized<'_> {
    fn value(&self, x: &[f64]) -> Result<f64, EvalError> {
        let mut v = self.objective.eval(x, &[])?;
        let mut pen = 0.0;
        for (c, s) in self.inst.rows() {
            let g = self.constraints[c].eval(x, &self.inst.embedded.scenarios[s].values)?;
            if g > 0.0 {
                pen += g * g;
            }
        }
        v += self.mu * pen;
        Ok(v)
    }

    fn value_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>), EvalError> {
        let (mut v, mut grad) = self.objective.value_and_gradient(x, &[])?;
        let mut pen = 0.0;
        for (c, s) in self.inst.rows() {
            let xi = &self.inst.embedded.scenarios[s].values;
            let g = self.constraints[c].eval(x, xi)?;
            if g > 0.0 {
                pen += g * g;
                let dg = self.constraints[c].gradient(x, xi)?;
                for (gi, di) in grad.iter_mut().zip(dg) {
                    *gi += 2.0 * self.mu * g * di;
                }
            }
        }
        v += self.mu * pen;
        Ok((v, grad))
    }
}

fn project(x: &mut [f64], bounds: &[(f64, f64)]) {
    for (v, &(lo, hi)) in x.iter_mut().zip(bounds) {
        *v = v.clamp(lo, hi);
    }
}

const ARMIJO: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 200;
const STEP_TOL: f64 = 1e-14;
const F_STALL: f64 = 4.0 * f64::EPSILON;

impl DepBackend for PenaltyBackend {
    fn id(&self) -> &'static str {
        SolverId::BuiltinPenalty.as_str()
    }

    fn solve(&self, inst: &DepInstance, cfg: &SolverConfig, start: &[f64]) -> Result<Solution, DepError> {
        let spec = inst.spec();
        let uses_abs = spec.objective.contains_abs() || spec.constraints.iter().any(Expression::contains_abs);
        let smooth = |e: &Expression| match cfg.abs_smoothing {
            Some(eps) => e.smooth_abs(eps),
            None => e.clone(),
        };
        if uses_abs && cfg.abs_smoothing.is_none() {
            return Err(DepError::AbsNotSmoothed);
        }
        let mut pen = Penalized {
            inst,
            objective: smooth(&spec.objective),
            constraints: spec.constraints.iter().map(smooth).collect(),
            mu: cfg.mu0,
        };
        let mut x = start.to_vec();
        project(&mut x, &spec.bounds);
        let mut iterations = 0;
        let mut status = None;
        for _ in 0..cfg.penalty_rounds {
            let (next, iters, capped) = minimize_round(&pen, cfg, x)?;
            x = next;
            iterations += iters;
            if inst.max_violation(&x)? <= cfg.feas_tol {
                status = Some(if capped { Status::MaxIterations } else { Status::Optimal });
                break;
            }
            pen.mu *= cfg.mu_growth;
        }
        let status = status.unwrap_or_else(|| {
            let viol = inst.max_violation(&x).unwrap_or(f64::INFINITY);
            // heuristic infeasibility test on the last round
            if viol > cfg.feas_tol.sqrt() {
                Status::Infeasible
            } else {
                Status::MaxIterations
            }
        });
        Ok(finish(inst, cfg, self.id(), start, x, status, iterations))
    }
}

/// One penalty round of projected gradient descent with Armijo backtracking.
fn minimize_round(pen: &Penalized<'_>, cfg: &SolverConfig, mut x: Vec<f64>) -> Result<(Vec<f64>, usize, bool), DepError> {
    let bounds = &pen.inst.spec.bounds;
    let (mut fx, mut grad) = pen.value_grad(&x)?;
    let mut cand = vec![0.0; x.len()];
    for it in 0..cfg.max_inner_iterations {
        let mut t = cfg.initial_step;
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            for ((c, xi), gi) in cand.iter_mut().zip(&x).zip(&grad) {
                *c = xi - t * gi;
            }
            project(&mut cand, bounds);
            let slope: f64 = cand.iter().zip(&x).zip(&grad).map(|((c, xi), gi)| (c - xi) * gi).sum();
            if cand == x {
                break;
            }
            if let Ok(fc) = pen.value(&cand) {
                if fc <= fx + ARMIJO * slope {
                    accepted = Some(fc);
                    break;
                }
            }
            t *= cfg.step_shrink;
        }
        let Some(fc) = accepted else {
            return Ok((x, it, false));
        };
        let stalled = fx - fc <= F_STALL * (1.0 + fx.abs());
        let step = cand.iter().zip(&x).map(|(c, xi)| (c - xi).abs()).fold(0.0, f64::max);
        let scale = 1.0 + x.iter().map(|v| v.abs()).fold(0.0, f64::max);
        std::mem::swap(&mut x, &mut cand);
        (fx, grad) = pen.value_grad(&x)?;
        if stalled || step <= STEP_TOL * scale {
            return Ok((x, it + 1, false));
        }
    }
    Ok((x, cfg.max_inner_iterations, true))
}

// ---------------------------------------------------------------------------
// grid oracle

/// Tensor grid over the bounds box, nodes indexed row-major (x1 outermost).
struct Grid {
    axes: Vec<Vec<f64>>,
    spacing: Vec<f64>,
}

impl Grid {
    fn new(bounds: &[(f64, f64)], resolution: usize) -> Grid {
        let axes = bounds
            .iter()
            .map(|&(lo, hi)| {
                (0..resolution)
                    .map(|i| lo + (hi - lo) * i as f64 / (resolution - 1) as f64)
                    .collect()
            })
            .collect();
        let spacing = bounds
            .iter()
            .map(|&(lo, hi)| (hi - lo) / (resolution - 1) as f64)
            .collect();
        Grid { axes, spacing }
    }

    fn len(&self) -> usize {
        self.axes.iter().map(Vec::len).product()
    }

    fn node(&self, mut idx: usize) -> Vec<f64> {
        let mut x = vec![0.0; self.axes.len()];
        for d in (0..self.axes.len()).rev() {
            let len = self.axes[d].len();
            x[d] = self.axes[d][idx % len];
            idx /= len;
        }
        x
    }

    /// Node indices sorted by objective value, ties by index. Nodes where the
    /// objective fails to evaluate are dropped.
    fn objective_order(&self, objective: &Expression) -> Vec<u32> {
        let values: Vec<Option<f64>> = (0..self.len())
            .into_par_iter()
            .map(|i| objective.eval(&self.node(i), &[]).ok().filter(|v| !v.is_nan()))
            .collect();
        let mut order: Vec<(f64, u32)> = values
            .into_iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (v, i as u32)))
            .collect();
        order.par_sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        order.into_iter().map(|(_, i)| i).collect()
    }
}

fn check_grid(spec: &ProblemSpec) -> Result<(), DepError> {
    if spec.n > 2 {
        Err(DepError::GridOracleDimension(spec.n))
    } else {
        Ok(())
    }
}

fn node_feasible(inst: &DepInstance, x: &[f64], tol: f64) -> bool {
    matches!(is_feasible(inst, x, tol), Ok(true))
}

/// Local pass at `refine_factor`× resolution around the coarse incumbent.
/// Only strict improvements replace the incumbent.
fn refine(inst: &DepInstance, cfg: &SolverConfig, grid: &Grid, center: Vec<f64>) -> (Vec<f64>, usize) {
    let spec = inst.spec();
    let r = cfg.refine_factor as i64;
    let mut best_f = spec.objective.eval(&center, &[]).unwrap_or(f64::INFINITY);
    let mut best = center.clone();
    let per_axis: Vec<Vec<f64>> = center
        .iter()
        .zip(&grid.spacing)
        .zip(&spec.bounds)
        .map(|((&c, &h), &(lo, hi))| {
            (-r..=r)
                .map(|k| c + k as f64 * h / r as f64)
                .filter(|v| (lo..=hi).contains(v))
                .collect()
        })
        .collect();
    let fine = Grid {
        axes: per_axis,
        spacing: Vec::new(),
    };
    let mut examined = 0;
    for i in 0..fine.len() {
        let x = fine.node(i);
        examined += 1;
        let Ok(f) = spec.objective.eval(&x, &[]) else {
            continue;
        };
        if f < best_f && node_feasible(inst, &x, cfg.feas_tol) {
            best_f = f;
            best = x;
        }
    }
    (best, examined)
}

fn grid_finish(
    inst: &DepInstance,
    cfg: &SolverConfig,
    start: &[f64],
    grid: &Grid,
    hit: Option<(usize, u32)>,
) -> Solution {
    let id = SolverId::GridOracle.as_str();
    match hit {
        None => finish(inst, cfg, id, start, start.to_vec(), Status::Infeasible, grid.len()),
        Some((pos, node)) => {
            let (x, examined) = refine(inst, cfg, grid, grid.node(node as usize));
            finish(inst, cfg, id, start, x, Status::Optimal, pos + 1 + examined)
        }
    }
}

impl DepBackend for GridOracleBackend {
    fn id(&self) -> &'static str {
        SolverId::GridOracle.as_str()
    }

    fn solve(&self, inst: &DepInstance, cfg: &SolverConfig, start: &[f64]) -> Result<Solution, DepError> {
        check_grid(inst.spec())?;
        let grid = Grid::new(&inst.spec().bounds, cfg.grid_resolution);
        let order = grid.objective_order(&inst.spec().objective);
        let hit = order
            .iter()
            .position(|&i| node_feasible(inst, &grid.node(i as usize), cfg.feas_tol))
            .map(|pos| (pos, order[pos]));
        Ok(grid_finish(inst, cfg, start, &grid, hit))
    }
}

/// Grid-oracle state shared by every subset of one scenario set: the
/// objective ordering of the coarse nodes and, per node, the bitmask of
/// scenarios that violate some constraint there. `solve_subset` returns
/// exactly what `solve` returns on the corresponding sub-instance.
pub struct GridCache {
    grid: Grid,
    order: Vec<u32>,
    violators: Vec<u64>,
    scenarios: usize,
}

impl GridCache {
    pub fn build(full: &DepInstance, cfg: &SolverConfig) -> Result<GridCache, DepError> {
        cfg.validate()?;
        check_grid(full.spec())?;
        let k = full.embedded().len();
        if k > 64 {
            return Err(DepError::Config("grid cache holds at most 64 scenarios".into()));
        }
        let grid = Grid::new(&full.spec().bounds, cfg.grid_resolution);
        let order = grid.objective_order(&full.spec().objective);
        let spec = full.spec();
        let violators = (0..grid.len())
            .into_par_iter()
            .map(|i| {
                let x = grid.node(i);
                let mut mask = 0u64;
                for (c, s) in full.rows() {
                    if mask >> s & 1 == 1 {
                        continue;
                    }
                    let ok = matches!(
                        spec.constraints[c].eval(&x, &full.embedded().scenarios[s].values),
                        Ok(g) if g <= cfg.feas_tol
                    );
                    if !ok {
                        mask |= 1 << s;
                    }
                }
                mask
            })
            .collect();
        Ok(GridCache {
            grid,
            order,
            violators,
            scenarios: k,
        })
    }

    /// `sub` must be the full instance restricted to the scenarios in `mask`.
    pub fn solve_subset(&self, sub: &DepInstance, mask: u64, cfg: &SolverConfig) -> Result<Solution, DepError> {
        debug_assert_eq!(sub.embedded().len(), mask.count_ones() as usize);
        debug_assert!(self.scenarios == 64 || mask >> self.scenarios == 0);
        let start = cfg.start_for(sub.spec())?;
        let hit = self
            .order
            .iter()
            .position(|&i| self.violators[i as usize] & mask == 0)
            .map(|pos| (pos, self.order[pos]));
        Ok(grid_finish(sub, cfg, &start, &self.grid, hit))
    }
}
