//! The self-describing JSON problem file every subcommand consumes.
//!
//! One file carries the plant, horizon, initial state, information
//! structure, and optionally the constraint polytopes, the quadratic cost,
//! and tolerance options:
//!
//! ```json
//! {
//!   "plant": { "A": [[...]], "B": [[...]], "C": [[...]],
//!              "D": [[...]], "H": [[...]] },
//!   "N": 3,
//!   "x0": [0.5, -0.5, 0.25],
//!   "info": { "kind": "custom", "N": 3, "m": 2, "p": 3,
//!             "blocks": { "0,0": [[0,0,0],[1,0,0]], ... } },
//!   "constraints": { "U": [[...]], "V": [[...]], "b": [...],
//!                    "R": [[...]], "z": [...],
//!                    "Aw": [[...]], "bw": [...] },
//!   "cost": { "Qx": [[...]], "Ru": [[...]] },
//!   "options": { "tol": 1e-9, "delta_mode": "numeric" }
//! }
//! ```
//!
//! `D` defaults to the identity and `H` to zero when omitted. `Qx`/`Ru`
//! accept either a single matrix applied at every stage or an explicit list
//! (`N + 1` state weights, `N` input weights). `constraints` and `cost` are
//! optional: certification needs neither, synthesis needs both.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::infostruct::{InfoStructSpec, InformationStructure};
use crate::lifted::{ConstraintSpec, DeltaMode, Plant};
use crate::robust::CostSpec;

type Rows = Vec<Vec<f64>>;

fn matrix(what: &str, rows: &Rows) -> Result<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|row| row.len() != c) {
        return Err(Error::Schema(format!("{what} has ragged rows")));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

fn vector(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantFile {
    #[serde(rename = "A")]
    pub a: Rows,
    #[serde(rename = "B")]
    pub b: Rows,
    #[serde(rename = "C")]
    pub c: Rows,
    #[serde(rename = "D", default, skip_serializing_if = "Option::is_none")]
    pub d: Option<Rows>,
    #[serde(rename = "H", default, skip_serializing_if = "Option::is_none")]
    pub h: Option<Rows>,
}

impl PlantFile {
    fn build(&self) -> Result<Plant> {
        let a = matrix("plant.A", &self.a)?;
        let n = a.nrows();
        let d = match &self.d {
            Some(rows) => matrix("plant.D", rows)?,
            None => DMatrix::identity(n, n),
        };
        let c = matrix("plant.C", &self.c)?;
        let h = match &self.h {
            Some(rows) => matrix("plant.H", rows)?,
            None => DMatrix::zeros(c.nrows(), n),
        };
        Plant::new(a, matrix("plant.B", &self.b)?, c, d, h)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintFile {
    #[serde(rename = "U")]
    pub u: Rows,
    #[serde(rename = "V")]
    pub v: Rows,
    pub b: Vec<f64>,
    #[serde(rename = "R")]
    pub r: Rows,
    pub z: Vec<f64>,
    #[serde(rename = "Aw")]
    pub aw: Rows,
    pub bw: Vec<f64>,
}

impl ConstraintFile {
    fn build(&self, n: usize, m: usize) -> Result<ConstraintSpec> {
        let pad_cols = |what: &str, rows: &Rows, cols: usize| -> Result<DMatrix<f64>> {
            if rows.is_empty() {
                // Zero-row blocks cannot carry their width in JSON.
                return Ok(DMatrix::zeros(0, cols));
            }
            matrix(what, rows)
        };
        ConstraintSpec::new(
            pad_cols("constraints.U", &self.u, n)?,
            pad_cols("constraints.V", &self.v, m)?,
            vector(&self.b),
            pad_cols("constraints.R", &self.r, n)?,
            vector(&self.z),
            matrix("constraints.Aw", &self.aw)?,
            vector(&self.bw),
        )
    }
}

/// A stage weight: one matrix reused at every stage, or an explicit list.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StageWeights {
    Uniform(Rows),
    PerStage(Vec<Rows>),
}

impl StageWeights {
    fn build(&self, what: &str, count: usize) -> Result<Vec<DMatrix<f64>>> {
        match self {
            StageWeights::Uniform(rows) => Ok(vec![matrix(what, rows)?; count]),
            StageWeights::PerStage(list) => {
                if list.len() != count {
                    return Err(Error::Schema(format!(
                        "{what} must list {count} stage weights, got {}",
                        list.len()
                    )));
                }
                list.iter().map(|rows| matrix(what, rows)).collect()
            }
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostFile {
    #[serde(rename = "Qx")]
    pub qx: StageWeights,
    #[serde(rename = "Ru")]
    pub ru: StageWeights,
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptionsFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_mode: Option<DeltaMode>,
}

/// The raw problem file, structurally valid JSON but not yet cross-checked.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemFile {
    pub plant: PlantFile,
    #[serde(rename = "N")]
    pub n_steps: usize,
    pub x0: Vec<f64>,
    pub info: InfoStructSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constraints: Option<ConstraintFile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost: Option<CostFile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<OptionsFile>,
}

/// A fully validated problem, ready for the library calls.
#[derive(Clone, Debug)]
pub struct ProblemInstance {
    pub plant: Plant,
    pub n_steps: usize,
    pub x0: DVector<f64>,
    pub info: InformationStructure,
    /// The original structure description, so callers can dispatch the
    /// specialized certification tests.
    pub info_spec: InfoStructSpec,
    pub constraints: Option<ConstraintSpec>,
    pub cost: Option<CostSpec>,
    pub tol: f64,
    pub delta_mode: DeltaMode,
}

impl ProblemFile {
    pub fn from_json_str(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    /// Cross-checks every dimension and builds the typed instance.
    pub fn build(&self) -> Result<ProblemInstance> {
        if self.n_steps == 0 {
            return Err(Error::Schema("N must be at least 1".into()));
        }
        let plant = self.plant.build()?;
        let (n, m, p) = (plant.num_states(), plant.num_inputs(), plant.num_outputs());
        if self.x0.len() != n {
            return Err(Error::Schema(format!(
                "x0 must have length {n}, got {}",
                self.x0.len()
            )));
        }
        let info = self.info.build()?;
        if info.horizon() != self.n_steps {
            return Err(Error::Schema(format!(
                "info.N = {} disagrees with N = {}",
                info.horizon(),
                self.n_steps
            )));
        }
        if info.num_inputs() != m || info.num_outputs() != p {
            return Err(Error::Schema(format!(
                "info blocks must be {m}x{p} to match the plant, got {}x{}",
                info.num_inputs(),
                info.num_outputs()
            )));
        }
        let constraints = match &self.constraints {
            Some(c) => {
                let spec = c.build(n, m)?;
                if spec.u.ncols() != n || spec.r.ncols() != n {
                    return Err(Error::Schema(format!(
                        "constraints.U and constraints.R must have {n} columns"
                    )));
                }
                if spec.v.ncols() != m {
                    return Err(Error::Schema(format!(
                        "constraints.V must have {m} columns"
                    )));
                }
                if spec.aw.ncols() != n {
                    return Err(Error::Schema(format!(
                        "constraints.Aw must have {n} columns"
                    )));
                }
                Some(spec)
            }
            None => None,
        };
        let cost = match &self.cost {
            Some(c) => {
                let qx = c.qx.build("cost.Qx", self.n_steps + 1)?;
                let ru = c.ru.build("cost.Ru", self.n_steps)?;
                if qx.iter().any(|w| w.shape() != (n, n)) {
                    return Err(Error::Schema(format!("cost.Qx weights must be {n}x{n}")));
                }
                if ru.iter().any(|w| w.shape() != (m, m)) {
                    return Err(Error::Schema(format!("cost.Ru weights must be {m}x{m}")));
                }
                Some(CostSpec::new(qx, ru)?)
            }
            None => None,
        };
        let options = self.options.unwrap_or_default();
        Ok(ProblemInstance {
            plant,
            n_steps: self.n_steps,
            x0: vector(&self.x0),
            info,
            info_spec: self.info.clone(),
            constraints,
            cost,
            tol: options.tol.unwrap_or(1e-9),
            delta_mode: options.delta_mode.unwrap_or(DeltaMode::Numeric),
        })
    }
}
