use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::expr::{Expression, ParseError};

#[derive(Debug, Error)]
pub enum ProblemError {
    #[error("{what}: {source}")]
    Parse {
        what: String,
        #[source]
        source: ParseError,
    },
    #[error("invalid problem: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// On-disk problem schema:
/// `{"n":2,"u":2,"objective":"x1+x2","constraints":["xi1 - x1","xi2 - x2"],
///   "bounds":[[-10,10],[-10,10]],"start":[0,0]}`
/// plus optional `delta` (deterministic instance parameters) and `class`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemFile {
    pub n: usize,
    pub u: usize,
    pub objective: String,
    pub constraints: Vec<String>,
    pub bounds: Vec<[f64; 2]>,
    pub start: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub delta: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<String>,
}

/// `min f(x)` subject to `g_k(x, ξ) ≤ 0` for every embedded ξ, inside a box.
#[derive(Clone, Debug, PartialEq)]
pub struct ProblemSpec {
    pub n: usize,
    pub u: usize,
    pub objective: Expression,
    pub constraints: Vec<Expression>,
    pub bounds: Vec<(f64, f64)>,
    pub start: Vec<f64>,
    pub delta: Vec<f64>,
    pub class: Option<String>,
}

impl ProblemSpec {
    pub fn from_file(file: &ProblemFile) -> Result<Self, ProblemError> {
        let (n, u) = (file.n, file.u);
        if n == 0 {
            return Err(ProblemError::Invalid("n must be ≥ 1".into()));
        }
        let objective = Expression::parse(&file.objective, n, u)
            .map_err(|source| ProblemError::Parse {
                what: "objective".into(),
                source,
            })?
            .without_xi()
            .ok_or_else(|| {
                ProblemError::Invalid("objective must not depend on xi variables".into())
            })?;
        if file.constraints.is_empty() {
            return Err(ProblemError::Invalid("need at least one constraint".into()));
        }
        let constraints = file
            .constraints
            .iter()
            .enumerate()
            .map(|(k, s)| {
                Expression::parse(s, n, u).map_err(|source| ProblemError::Parse {
                    what: format!("constraint {}", k + 1),
                    source,
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        if file.bounds.len() != n || file.start.len() != n {
            return Err(ProblemError::Invalid(format!(
                "bounds and start must have {n} entries"
            )));
        }
        for (i, (b, s)) in file.bounds.iter().zip(&file.start).enumerate() {
            if !(b[0].is_finite() && b[1].is_finite() && b[0] <= b[1]) {
                return Err(ProblemError::Invalid(format!("bad bounds for x{}", i + 1)));
            }
            if !(b[0] <= *s && *s <= b[1]) {
                return Err(ProblemError::Invalid(format!(
                    "start x{} = {s} outside [{}, {}]",
                    i + 1,
                    b[0],
                    b[1]
                )));
            }
        }
        Ok(ProblemSpec {
            n,
            u,
            objective,
            constraints,
            bounds: file.bounds.iter().map(|b| (b[0], b[1])).collect(),
            start: file.start.clone(),
            delta: file.delta.clone(),
            class: file.class.clone(),
        })
    }

    pub fn from_json(text: &str) -> Result<Self, ProblemError> {
        Self::from_file(&serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ProblemError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn m(&self) -> usize {
        self.constraints.len()
    }

    pub fn to_file(&self) -> ProblemFile {
        ProblemFile {
            n: self.n,
            u: self.u,
            objective: self.objective.to_string(),
            constraints: self.constraints.iter().map(|c| c.to_string()).collect(),
            bounds: self.bounds.iter().map(|&(lo, hi)| [lo, hi]).collect(),
            start: self.start.clone(),
            delta: self.delta.clone(),
            class: self.class.clone(),
        }
    }

    /// Identity of the problem class in the run-record store: the `class`
    /// label if given, otherwise the canonical expressions and dimensions.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        match &self.class {
            Some(c) => h.update(format!("class:{c}")),
            None => {
                h.update(format!("n={};u={};f={}", self.n, self.u, self.objective));
                for c in &self.constraints {
                    h.update(format!(";g={c}"));
                }
            }
        }
        hex::encode(h.finalize())
    }

    pub fn in_bounds(&self, x: &[f64]) -> bool {
        x.len() == self.n && x.iter().zip(&self.bounds).all(|(v, (lo, hi))| lo <= v && v <= hi)
    }
}
