//! JSON file formats: problems, MPC scenarios and terminal sets.
//!
//! Matrices are row-major arrays of rows.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::mpc::MpcScenario;
use crate::problem::{ConvexFunction, FeasibilityProblem, LinearEquality, OptimizationProblem};
use crate::terminal::{
    dare_lqr, ellipsoid_rho, max_contractive_polyhedron, robust_admissible_rows, admissible_rows,
    steady_state_target, EllipsoidSet, ModelBounds, PolyhedralSet, SteadyStateTarget, TerminalSet,
};

pub type Rows = Vec<Vec<f64>>;

pub fn matrix_from_rows(rows: &Rows, name: &str) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::InvalidArgument(format!("matrix {name} has rows of different lengths")));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

pub fn rows_from_matrix(m: &DMatrix<f64>) -> Rows {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn vector(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}

/// `½ x'Qx + q'x + c`; a missing `Q` means affine.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FunctionSpec {
    #[serde(rename = "Q", default, skip_serializing_if = "Option::is_none")]
    pub quad: Option<Rows>,
    pub q: Vec<f64>,
    #[serde(default)]
    pub c: f64,
}

impl FunctionSpec {
    pub fn to_function(&self, n: usize) -> Result<ConvexFunction> {
        check_dim(n, self.q.len())?;
        match &self.quad {
            None => Ok(ConvexFunction::linear(vector(&self.q), self.c)),
            Some(rows) => {
                let m = matrix_from_rows(rows, "Q")?;
                check_dim(n, m.nrows())?;
                let asym = (&m - m.transpose()).amax();
                if asym > 1e-12 * m.amax().max(1.0) {
                    return Err(Error::InvalidArgument(format!("quadratic form is not symmetric ({asym:e})")));
                }
                let f = ConvexFunction::quadratic(m, vector(&self.q), self.c)?;
                let min_eig = crate::problem::min_eigenvalue(f.hessian().expect("quadratic"));
                if min_eig < -1e-9 * f.hessian().expect("quadratic").norm().max(1.0) {
                    return Err(Error::NotConvex(min_eig));
                }
                Ok(f)
            }
        }
    }

    pub fn from_function(f: &ConvexFunction) -> Self {
        Self {
            quad: f.hessian().map(rows_from_matrix),
            q: f.linear_part().iter().copied().collect(),
            c: f.constant(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EqualitySpec {
    pub a: Vec<f64>,
    pub d: f64,
}

/// `min f_0(x)` subject to `f_i(x) ≤ 0` and `a_j'x = d_j`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProblemFile {
    pub n: usize,
    pub objective: FunctionSpec,
    #[serde(default)]
    pub inequalities: Vec<FunctionSpec>,
    #[serde(default)]
    pub equalities: Vec<EqualitySpec>,
}

impl ProblemFile {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn to_problem(&self) -> Result<OptimizationProblem> {
        let ineq = self
            .inequalities
            .iter()
            .map(|f| f.to_function(self.n))
            .collect::<Result<Vec<_>>>()?;
        let eq = self
            .equalities
            .iter()
            .map(|e| {
                check_dim(self.n, e.a.len())?;
                Ok(LinearEquality::new(vector(&e.a), e.d))
            })
            .collect::<Result<Vec<_>>>()?;
        OptimizationProblem::new(self.objective.to_function(self.n)?, FeasibilityProblem::new(self.n, ineq, eq)?)
    }

    pub fn from_problem(p: &OptimizationProblem) -> Self {
        Self {
            n: p.dim(),
            objective: FunctionSpec::from_function(p.objective()),
            inequalities: p.constraints().inequalities().iter().map(FunctionSpec::from_function).collect(),
            equalities: p
                .constraints()
                .equalities()
                .iter()
                .map(|e| EqualitySpec {
                    a: e.coeffs.iter().copied().collect(),
                    d: e.rhs,
                })
                .collect(),
        }
    }
}

/// Target set `{x : S(x − x_r) ≤ s}` the terminal set has to fit in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetSetSpec {
    #[serde(rename = "S")]
    pub s_matrix: Rows,
    pub s: Vec<f64>,
}

/// Model, constraints, costs and experiment settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioFile {
    #[serde(rename = "A")]
    pub a: Rows,
    #[serde(rename = "B")]
    pub b: Rows,
    #[serde(rename = "C")]
    pub c: Rows,
    pub u_min: Vec<f64>,
    pub u_max: Vec<f64>,
    pub y_min: Vec<f64>,
    pub y_max: Vec<f64>,
    pub horizon: usize,
    #[serde(rename = "Q_stage")]
    pub q_stage: Rows,
    #[serde(rename = "R_stage")]
    pub r_stage: Rows,
    /// Terminal cost weight; the Riccati solution for `(A, B, Q, R)` when absent.
    #[serde(rename = "P_cost", default, skip_serializing_if = "Option::is_none")]
    pub p_cost: Option<Rows>,
    pub target_set: TargetSetSpec,
    /// Vertices of the reference polytope.
    pub references: Rows,
    pub x0: Vec<f64>,
    pub r: Vec<f64>,
}

/// A scenario file with its matrices assembled.
#[derive(Clone, Debug)]
pub struct ModelData {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub u_min: DVector<f64>,
    pub u_max: DVector<f64>,
    pub y_min: DVector<f64>,
    pub y_max: DVector<f64>,
    pub horizon: usize,
    pub q_stage: DMatrix<f64>,
    pub r_stage: DMatrix<f64>,
    pub p_cost: DMatrix<f64>,
    pub k_lqr: DMatrix<f64>,
    pub s_matrix: DMatrix<f64>,
    pub s: DVector<f64>,
    pub references: Vec<DVector<f64>>,
    pub x0: DVector<f64>,
    pub r: DVector<f64>,
}

impl ModelData {
    pub fn bounds(&self) -> ModelBounds<'_> {
        ModelBounds {
            a: &self.a,
            b: &self.b,
            c: &self.c,
            u_min: &self.u_min,
            u_max: &self.u_max,
            y_min: &self.y_min,
            y_max: &self.y_max,
            s: &self.s_matrix,
            s_rhs: &self.s,
        }
    }

    pub fn target(&self) -> Result<SteadyStateTarget> {
        steady_state_target(&self.a, &self.b, &self.c, &self.r)
    }

    /// Scenario for the reference `r` of the file with the given terminal set.
    pub fn scenario(&self, terminal: &TerminalSetFile) -> Result<(MpcScenario, SteadyStateTarget)> {
        let target = self.target()?;
        let (set, gain) = terminal.resolve(self, &target)?;
        let scenario = MpcScenario {
            a: self.a.clone(),
            b: self.b.clone(),
            c: self.c.clone(),
            u_min: self.u_min.clone(),
            u_max: self.u_max.clone(),
            y_min: self.y_min.clone(),
            y_max: self.y_max.clone(),
            horizon: self.horizon,
            q_stage: self.q_stage.clone(),
            r_stage: self.r_stage.clone(),
            p_cost: self.p_cost.clone(),
            terminal: set,
            k_term: gain,
            reference_vertices: self.references.clone(),
        };
        scenario.validate()?;
        Ok((scenario, target))
    }

    /// Maximal λ-contractive admissible polyhedron of the LQR closed loop,
    /// valid for every reference of the polytope.
    pub fn lqr_polyhedron(&self, lambda: f64) -> Result<TerminalSetFile> {
        let rows = robust_admissible_rows(&self.bounds(), &self.k_lqr, &self.references)?;
        let a_cl = &self.a + &self.b * &self.k_lqr;
        let set = max_contractive_polyhedron(&a_cl, &rows.a_bar, &rows.b_bar, lambda)?;
        Ok(TerminalSetFile::Polyhedron {
            h: rows_from_matrix(&set.h),
            k: set.k.iter().copied().collect(),
            gain: Some(rows_from_matrix(&self.k_lqr)),
            metadata: Some(serde_json::json!({ "lambda": lambda })),
        })
    }
}

impl ScenarioFile {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn model(&self) -> Result<ModelData> {
        let a = matrix_from_rows(&self.a, "A")?;
        let b = matrix_from_rows(&self.b, "B")?;
        let c = matrix_from_rows(&self.c, "C")?;
        let q_stage = matrix_from_rows(&self.q_stage, "Q_stage")?;
        let r_stage = matrix_from_rows(&self.r_stage, "R_stage")?;
        let (p_lqr, k_lqr) = dare_lqr(&a, &b, &q_stage, &r_stage)?;
        let p_cost = match &self.p_cost {
            Some(rows) => matrix_from_rows(rows, "P_cost")?,
            None => p_lqr,
        };
        let s_matrix = matrix_from_rows(&self.target_set.s_matrix, "S")?;
        check_dim(a.nrows(), s_matrix.ncols())?;
        check_dim(s_matrix.nrows(), self.target_set.s.len())?;
        let data = ModelData {
            a,
            b,
            c,
            u_min: vector(&self.u_min),
            u_max: vector(&self.u_max),
            y_min: vector(&self.y_min),
            y_max: vector(&self.y_max),
            horizon: self.horizon,
            q_stage,
            r_stage,
            p_cost,
            k_lqr,
            s_matrix,
            s: vector(&self.target_set.s),
            references: self.references.iter().map(|r| vector(r)).collect(),
            x0: vector(&self.x0),
            r: vector(&self.r),
        };
        check_dim(data.a.nrows(), data.x0.len())?;
        check_dim(data.c.nrows(), data.r.len())?;
        Ok(data)
    }
}

/// Terminal set relative to the steady state `x_r` of the reference, with
/// the terminal feedback gain `K`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum TerminalSetFile {
    /// `(x − x_r)'P(x − x_r) ≤ ρ`; `ρ` is computed for the reference when absent.
    Ellipsoid {
        #[serde(rename = "P")]
        p: Rows,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        rho: Option<f64>,
        #[serde(rename = "K")]
        gain: Rows,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        metadata: Option<serde_json::Value>,
    },
    /// `H(x − x_r) ≤ k`; the gain defaults to the LQR gain of the scenario.
    Polyhedron {
        #[serde(rename = "H")]
        h: Rows,
        k: Vec<f64>,
        #[serde(rename = "K", default, skip_serializing_if = "Option::is_none")]
        gain: Option<Rows>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        metadata: Option<serde_json::Value>,
    },
}

impl TerminalSetFile {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn resolve(&self, model: &ModelData, target: &SteadyStateTarget) -> Result<(TerminalSet, DMatrix<f64>)> {
        match self {
            TerminalSetFile::Ellipsoid { p, rho, gain, .. } => {
                let p = matrix_from_rows(p, "P")?;
                let gain = matrix_from_rows(gain, "K")?;
                let rho = match rho {
                    Some(v) => *v,
                    None => ellipsoid_rho(&p, &admissible_rows(&model.bounds(), &gain, &target.r)?)?,
                };
                let set = EllipsoidSet {
                    p,
                    rho,
                    center: target.x_r.clone(),
                };
                Ok((TerminalSet::Ellipsoid(set), gain))
            }
            TerminalSetFile::Polyhedron { h, k, gain, .. } => {
                let set = PolyhedralSet::new(matrix_from_rows(h, "H")?, vector(k), target.x_r.clone())?;
                let gain = match gain {
                    Some(g) => matrix_from_rows(g, "K")?,
                    None => model.k_lqr.clone(),
                };
                Ok((TerminalSet::Polyhedron(set), gain))
            }
        }
    }
}
