//! Separable analytic densities used as fixtures: literal exponential-quadratic
//! mixtures per component, their superlevel sets, the α-from-β bridge and
//! seeded sampling.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::data::{DataPoint, DataSet};
use crate::rng;

#[derive(Debug, Error)]
pub enum DensityError {
    #[error("dimension mismatch: density has {expected} factors, point has {got}")]
    DimensionError { expected: usize, got: usize },
    #[error("invalid density: {0}")]
    Invalid(String),
    #[error("density integrates to {mass} over its truncated support, not 1")]
    NotNormalized { mass: f64 },
    #[error("superlevel threshold is not unique: the density is flat at its maximum")]
    DegenerateDensity,
    #[error("quadrature supports at most 2 dimensions, density has {0}")]
    TooManyDimensions(usize),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// One mixture term.
///
/// `Gaussian` is evaluated literally as `w / √(norm·π) · exp(−(x − center)² / div)`.
/// `Flat` is `w / (hi − lo)` on `[lo, hi]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Component {
    Gaussian {
        w: f64,
        norm: f64,
        center: f64,
        div: f64,
    },
    Flat {
        w: f64,
        lo: f64,
        hi: f64,
    },
}

impl Component {
    pub fn weight(&self) -> f64 {
        match *self {
            Component::Gaussian { w, .. } | Component::Flat { w, .. } => w,
        }
    }

    fn value(&self, x: f64) -> f64 {
        match *self {
            Component::Gaussian {
                w,
                norm,
                center,
                div,
            } => w / (norm * std::f64::consts::PI).sqrt() * (-(x - center).powi(2) / div).exp(),
            Component::Flat { w, lo, hi } => {
                if (lo..=hi).contains(&x) {
                    w / (hi - lo)
                } else {
                    0.0
                }
            }
        }
    }

    /// Interval holding effectively all of the term's mass.
    fn support(&self, scales: f64) -> (f64, f64) {
        match *self {
            Component::Gaussian { center, div, .. } => {
                let sd = (div / 2.0).sqrt();
                (center - scales * sd, center + scales * sd)
            }
            Component::Flat { lo, hi, .. } => (lo, hi),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureDensity1D {
    pub components: Vec<Component>,
}

impl MixtureDensity1D {
    pub fn validate(&self) -> Result<(), DensityError> {
        if self.components.is_empty() {
            return Err(DensityError::Invalid("factor has no components".into()));
        }
        let mut total = 0.0;
        for c in &self.components {
            match *c {
                Component::Gaussian { w, norm, div, center } => {
                    if !(norm > 0.0 && div > 0.0 && center.is_finite() && w >= 0.0) {
                        return Err(DensityError::Invalid(format!("bad component {c:?}")));
                    }
                }
                Component::Flat { w, lo, hi } => {
                    if !(lo < hi && lo.is_finite() && hi.is_finite() && w >= 0.0) {
                        return Err(DensityError::Invalid(format!("bad component {c:?}")));
                    }
                }
            }
            total += c.weight();
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(DensityError::Invalid(format!("weights sum to {total}")));
        }
        Ok(())
    }

    pub fn value(&self, x: f64) -> f64 {
        self.components.iter().map(|c| c.value(x)).sum()
    }

    fn support(&self, scales: f64) -> (f64, f64) {
        self.components
            .iter()
            .map(|c| c.support(scales))
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), (lo, hi)| {
                (a.min(lo), b.max(hi))
            })
    }

    /// Same shape per term, rescaled so each term integrates to its weight.
    pub fn normalized(&self) -> MixtureDensity1D {
        let components = self
            .components
            .iter()
            .map(|c| match *c {
                Component::Gaussian { w, center, div, .. } => Component::Gaussian {
                    w,
                    norm: div,
                    center,
                    div,
                },
                flat => flat,
            })
            .collect();
        MixtureDensity1D { components }
    }

    fn draw<R: Rng>(&self, rng: &mut R) -> f64 {
        let pick: f64 = rng.gen();
        let mut acc = 0.0;
        let mut chosen = self.components.last().expect("validated nonempty");
        for c in &self.components {
            acc += c.weight();
            if pick < acc {
                chosen = c;
                break;
            }
        }
        let u = rng::open_unit(rng);
        match *chosen {
            Component::Gaussian { center, div, .. } => Normal::new(center, (div / 2.0).sqrt())
                .expect("validated positive divisor")
                .inverse_cdf(u),
            Component::Flat { lo, hi, .. } => lo + u * (hi - lo),
        }
    }
}

/// Product of independent per-component mixtures.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProductDensity {
    pub factors: Vec<MixtureDensity1D>,
}

impl ProductDensity {
    pub fn new(factors: Vec<MixtureDensity1D>) -> Result<Self, DensityError> {
        let d = ProductDensity { factors };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<(), DensityError> {
        if self.factors.is_empty() {
            return Err(DensityError::Invalid("density has no factors".into()));
        }
        self.factors.iter().try_for_each(MixtureDensity1D::validate)
    }

    pub fn from_json(text: &str) -> Result<Self, DensityError> {
        let d: ProductDensity = serde_json::from_str(text)?;
        d.validate()?;
        Ok(d)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DensityError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn dim(&self) -> usize {
        self.factors.len()
    }

    pub fn eval(&self, point: &[f64]) -> Result<f64, DensityError> {
        if point.len() != self.dim() {
            return Err(DensityError::DimensionError {
                expected: self.dim(),
                got: point.len(),
            });
        }
        Ok(self
            .factors
            .iter()
            .zip(point)
            .map(|(f, &x)| f.value(x))
            .product())
    }

    pub fn normalized(&self) -> ProductDensity {
        ProductDensity {
            factors: self.factors.iter().map(MixtureDensity1D::normalized).collect(),
        }
    }

    /// Per-axis truncation box: component centers ± `scales` standard deviations.
    pub fn support_box(&self, scales: f64) -> Vec<(f64, f64)> {
        self.factors.iter().map(|f| f.support(scales)).collect()
    }

    /// `count` i.i.d. draws, deterministic in `seed`.
    pub fn sample(&self, count: usize, seed: u64) -> Result<DataSet, DensityError> {
        if count == 0 {
            return Err(DensityError::InvalidParameter("count must be ≥ 1".into()));
        }
        let mut rng = rng::seeded(seed);
        let points = (0..count)
            .map(|_| DataPoint::new(self.factors.iter().map(|f| f.draw(&mut rng)).collect()))
            .collect();
        DataSet::new(self.dim(), points).map_err(|e| DensityError::Invalid(e.to_string()))
    }
}

/// Density evaluation as a free function.
pub fn density_eval(d: &ProductDensity, point: &[f64]) -> Result<f64, DensityError> {
    d.eval(point)
}

/// The superlevel set `{ξ : P(ξ) ≥ α}`.
#[derive(Clone, Debug)]
pub struct XiAlphaRegion {
    pub density: ProductDensity,
    pub alpha: f64,
}

impl XiAlphaRegion {
    pub fn new(density: ProductDensity, alpha: f64) -> Self {
        XiAlphaRegion { density, alpha }
    }

    pub fn contains(&self, point: &[f64]) -> Result<bool, DensityError> {
        Ok(self.density.eval(point)? >= self.alpha)
    }
}

pub fn xi_alpha_member(region: &XiAlphaRegion, point: &[f64]) -> Result<bool, DensityError> {
    region.contains(point)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadratureSettings {
    pub nodes_per_axis: usize,
    /// Truncation half-width in per-component standard deviations.
    pub support_scales: f64,
    pub mass_tol: f64,
    pub v_tol: f64,
    pub max_iter: usize,
}

impl Default for QuadratureSettings {
    fn default() -> Self {
        QuadratureSettings {
            nodes_per_axis: 2001,
            support_scales: 8.0,
            mass_tol: 1e-6,
            v_tol: 1e-10,
            max_iter: 200,
        }
    }
}

/// Trapezoid nodes and weights on `[lo, hi]`.
fn trapezoid(lo: f64, hi: f64, nodes: usize) -> Vec<(f64, f64)> {
    let h = (hi - lo) / (nodes - 1) as f64;
    (0..nodes)
        .map(|i| {
            let x = lo + (hi - lo) * i as f64 / (nodes - 1) as f64;
            let w = if i == 0 || i == nodes - 1 { h / 2.0 } else { h };
            (x, w)
        })
        .collect()
}

/// Tensor-grid quadrature of a separable density: nodes sorted by level-density
/// value (descending) with cumulative mass, so any superlevel mass is a
/// binary search.
struct SuperlevelTable {
    levels: Vec<f64>,
    cumulative: Vec<f64>,
}

impl SuperlevelTable {
    fn plateau_len(&self) -> usize {
        self.levels.iter().take_while(|&&l| l == self.levels[0]).count()
    }

    /// `level` decides membership, `law` supplies the mass. Both must share
    /// the dimension; the box comes from `law`.
    fn build(
        level: &ProductDensity,
        law: &ProductDensity,
        q: &QuadratureSettings,
    ) -> Result<Self, DensityError> {
        if level.dim() != law.dim() {
            return Err(DensityError::DimensionError {
                expected: level.dim(),
                got: law.dim(),
            });
        }
        if law.dim() > 2 {
            return Err(DensityError::TooManyDimensions(law.dim()));
        }
        if q.nodes_per_axis < 2 {
            return Err(DensityError::InvalidParameter("need ≥ 2 quadrature nodes".into()));
        }
        // per-axis tables: (level value, law value × weight)
        let axes: Vec<Vec<(f64, f64)>> = law
            .support_box(q.support_scales)
            .into_iter()
            .zip(level.factors.iter().zip(&law.factors))
            .map(|((lo, hi), (lf, mf))| {
                trapezoid(lo, hi, q.nodes_per_axis)
                    .into_iter()
                    .map(|(x, w)| (lf.value(x), mf.value(x) * w))
                    .collect()
            })
            .collect();
        let mut nodes: Vec<(f64, f64)> = vec![(1.0, 1.0)];
        for axis in &axes {
            nodes = nodes
                .iter()
                .flat_map(|&(l, m)| axis.iter().map(move |&(al, am)| (l * al, m * am)))
                .collect();
        }
        nodes.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut acc = 0.0;
        let cumulative = nodes
            .iter()
            .map(|&(_, m)| {
                acc += m;
                acc
            })
            .collect();
        Ok(SuperlevelTable {
            levels: nodes.into_iter().map(|(l, _)| l).collect(),
            cumulative,
        })
    }

    fn total(&self) -> f64 {
        *self.cumulative.last().unwrap_or(&0.0)
    }

    fn max_level(&self) -> f64 {
        self.levels.first().copied().unwrap_or(0.0)
    }

    /// Mass of `{level ≥ v}`.
    fn mass(&self, v: f64) -> f64 {
        let k = self.levels.partition_point(|&l| l >= v);
        if k == 0 {
            0.0
        } else {
            self.cumulative[k - 1]
        }
    }
}

/// Mass under `law` of the superlevel set `{level ≥ alpha}`.
pub fn superlevel_mass(
    level: &ProductDensity,
    alpha: f64,
    law: &ProductDensity,
    q: &QuadratureSettings,
) -> Result<f64, DensityError> {
    Ok(SuperlevelTable::build(level, law, q)?.mass(alpha))
}

/// Density threshold `v` whose superlevel set carries mass `1 − beta`.
///
/// Bisection on `v` over `[0, max density]` against a tensor trapezoid grid.
pub fn alpha_from_beta(
    d: &ProductDensity,
    beta: f64,
    q: &QuadratureSettings,
) -> Result<f64, DensityError> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(DensityError::InvalidParameter(format!(
            "beta must lie in (0, 1), got {beta}"
        )));
    }
    let table = SuperlevelTable::build(d, d, q)?;
    let total = table.total();
    if (total - 1.0).abs() > 10.0 * q.mass_tol {
        return Err(DensityError::NotNormalized { mass: total });
    }
    let target = 1.0 - beta;
    // invariant: mass(lo) ≥ target > mass(hi)
    let mut lo = 0.0;
    let mut hi = table.max_level();
    if table.mass(hi) >= target {
        // a strict mode occupies at most 2^dim tied nodes; more means a plateau
        if table.plateau_len() > 1 << d.dim() {
            return Err(DensityError::DegenerateDensity);
        }
        return Ok(hi);
    }
    for _ in 0..q.max_iter {
        let mid = 0.5 * (lo + hi);
        let m = table.mass(mid);
        if (m - target).abs() <= q.mass_tol {
            return Ok(mid);
        }
        if m >= target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= q.v_tol {
            break;
        }
    }
    Ok(lo)
}

/// One row of a 2-D contour grid.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ContourRow {
    pub xi1: f64,
    pub xi2: f64,
    pub density: f64,
    pub member: bool,
}

/// Regular `resolution × resolution` grid over the truncation box of a 2-D
/// density, flagging membership in `{P ≥ alpha}`.
pub fn contour_grid(
    d: &ProductDensity,
    alpha: f64,
    resolution: usize,
    scales: f64,
) -> Result<Vec<ContourRow>, DensityError> {
    if d.dim() != 2 {
        return Err(DensityError::DimensionError {
            expected: 2,
            got: d.dim(),
        });
    }
    if resolution < 2 {
        return Err(DensityError::InvalidParameter("resolution must be ≥ 2".into()));
    }
    let bx = d.support_box(scales);
    let axis = |(lo, hi): (f64, f64)| -> Vec<f64> {
        trapezoid(lo, hi, resolution).into_iter().map(|(x, _)| x).collect()
    };
    let (a1, a2) = (axis(bx[0]), axis(bx[1]));
    let mut rows = Vec::with_capacity(resolution * resolution);
    for &xi1 in &a1 {
        for &xi2 in &a2 {
            let density = d.eval(&[xi1, xi2])?;
            rows.push(ContourRow {
                xi1,
                xi2,
                density,
                member: density >= alpha,
            });
        }
    }
    Ok(rows)
}

/// The two-factor bimodal product density used throughout the examples,
/// with the constants exactly as printed.
pub fn bimodal_example() -> ProductDensity {
    let g = |w, norm, center, div| Component::Gaussian {
        w,
        norm,
        center,
        div,
    };
    ProductDensity {
        factors: vec![
            MixtureDensity1D {
                components: vec![g(0.5, 2.0, -2.0, 1.0), g(0.5, 3.6, 3.0, 1.8)],
            },
            MixtureDensity1D {
                components: vec![g(0.5, 2.4, 0.0, 1.2), g(0.5, 3.2, 5.0, 1.6)],
            },
        ],
    }
}

/// Standard normal pdf written in the literal form (`norm = 2`, `div = 2`).
pub fn standard_normal() -> ProductDensity {
    ProductDensity {
        factors: vec![MixtureDensity1D {
            components: vec![Component::Gaussian {
                w: 1.0,
                norm: 2.0,
                center: 0.0,
                div: 2.0,
            }],
        }],
    }
}
