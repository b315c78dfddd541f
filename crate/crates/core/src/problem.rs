//! Convex functions, feasibility problems and the squared-violation merit
//! function driven to zero by the Newton feasibility solver.
//!
//! Every function is either affine or a convex quadratic
//! `f(x) = ½ x'Qx + q'x + c`. A feasibility problem collects inequalities
//! `f_i(x) ≤ 0` and linear equalities `c_j'x = d_j`; its merit function is
//!
//! ```text
//! F(x) = ½ Σ_i max(f_i(x), 0)² + ½ Σ_j (c_j'x − d_j)²
//! ```
//!
//! which is convex, continuously differentiable, and zero exactly on the
//! feasible set.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{check_dim, Error, Result};

/// Relative tolerance for the positive semidefiniteness check.
const PSD_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FunctionKind {
    Linear,
    Quadratic,
}

/// `f(x) = ½ x'Qx + q'x + c` with `Q` symmetric positive semidefinite, or an
/// affine function when `Q` is absent.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvexFunction {
    quad: Option<DMatrix<f64>>,
    lin: DVector<f64>,
    constant: f64,
}

impl ConvexFunction {
    pub fn linear(lin: DVector<f64>, constant: f64) -> Self {
        Self {
            quad: None,
            lin,
            constant,
        }
    }

    /// Builds a quadratic function. `quad` is symmetrized as `(Q + Q')/2`.
    /// Debug builds additionally reject matrices that are not positive
    /// semidefinite.
    pub fn quadratic(quad: DMatrix<f64>, lin: DVector<f64>, constant: f64) -> Result<Self> {
        if !quad.is_square() {
            return Err(Error::InvalidArgument(format!(
                "quadratic form must be square, got {}x{}",
                quad.nrows(),
                quad.ncols()
            )));
        }
        check_dim(quad.nrows(), lin.len())?;
        let quad = (&quad + quad.transpose()) * 0.5;
        if cfg!(debug_assertions) {
            let min_eig = min_eigenvalue(&quad);
            if min_eig < -PSD_TOLERANCE * quad.norm().max(1.0) {
                return Err(Error::NotConvex(min_eig));
            }
        }
        Ok(Self {
            quad: Some(quad),
            lin,
            constant,
        })
    }

    /// `(x − center)' M (x − center) + offset`, the form used by ellipsoids
    /// and tracking costs.
    pub fn centered_quadratic(m: &DMatrix<f64>, center: &DVector<f64>, offset: f64) -> Result<Self> {
        check_dim(m.nrows(), center.len())?;
        let sym = (m + m.transpose()) * 0.5;
        let lin = -(&sym * center) * 2.0;
        let constant = center.dot(&(&sym * center)) + offset;
        Self::quadratic(sym * 2.0, lin, constant)
    }

    pub fn dim(&self) -> usize {
        self.lin.len()
    }

    pub fn kind(&self) -> FunctionKind {
        if self.quad.is_some() {
            FunctionKind::Quadratic
        } else {
            FunctionKind::Linear
        }
    }

    /// The matrix `Q`, absent for affine functions.
    pub fn hessian(&self) -> Option<&DMatrix<f64>> {
        self.quad.as_ref()
    }

    pub fn linear_part(&self) -> &DVector<f64> {
        &self.lin
    }

    pub fn constant(&self) -> f64 {
        self.constant
    }

    /// The same function of the block `z[offset..offset + dim()]` of a vector of
    /// length `total`.
    pub fn embedded(&self, offset: usize, total: usize) -> Result<Self> {
        let n = self.dim();
        if offset + n > total {
            return Err(Error::DimensionMismatch {
                expected: total,
                found: offset + n,
            });
        }
        let mut lin = DVector::zeros(total);
        lin.rows_mut(offset, n).copy_from(&self.lin);
        let quad = self.quad.as_ref().map(|q| {
            let mut big = DMatrix::zeros(total, total);
            big.view_mut((offset, offset), (n, n)).copy_from(q);
            big
        });
        Ok(Self {
            quad,
            lin,
            constant: self.constant,
        })
    }

    /// Adds `coeff · z[index]` to the linear part.
    pub fn with_linear_term(mut self, index: usize, coeff: f64) -> Self {
        self.lin[index] += coeff;
        self
    }

    /// Same function with `delta` added to the constant term.
    pub fn shifted(&self, delta: f64) -> Self {
        let mut f = self.clone();
        f.constant += delta;
        f
    }

    pub fn value(&self, x: &DVector<f64>) -> f64 {
        let mut v = self.lin.dot(x) + self.constant;
        if let Some(q) = &self.quad {
            let n = x.len();
            let mut acc = 0.0;
            for j in 0..n {
                let xj = x[j];
                if xj == 0.0 {
                    continue;
                }
                let col = q.column(j);
                let mut s = 0.0;
                for i in 0..n {
                    s += col[i] * x[i];
                }
                acc += s * xj;
            }
            v += 0.5 * acc;
        }
        v
    }

    /// Writes `∇f(x)` into `out` without allocating.
    /// `|½x'Qx| + Σ|q_i x_i| + |c|`, the scale of the rounding error in [`Self::value`].
    pub fn value_magnitude(&self, x: &DVector<f64>) -> f64 {
        let quad = self.hessian().map_or(0.0, |q| 0.5 * x.dot(&(q * x)).abs());
        quad + self.linear_part().iter().zip(x.iter()).map(|(a, b)| (a * b).abs()).sum::<f64>() + self.constant().abs()
    }

    pub fn gradient_into(&self, x: &DVector<f64>, out: &mut DVector<f64>) {
        out.copy_from(&self.lin);
        if let Some(q) = &self.quad {
            out.gemv(1.0, q, x, 1.0);
        }
    }

    pub fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut g = DVector::zeros(x.len());
        self.gradient_into(x, &mut g);
        g
    }
}

/// `c'x = d`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearEquality {
    pub coeffs: DVector<f64>,
    pub rhs: f64,
}

impl LinearEquality {
    pub fn new(coeffs: DVector<f64>, rhs: f64) -> Self {
        Self { coeffs, rhs }
    }

    pub fn residual(&self, x: &DVector<f64>) -> f64 {
        self.coeffs.dot(x) - self.rhs
    }
}

/// Which generalized Hessian of the merit function to use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum HessianMode {
    /// `Σ_{i∈I(x)} ∇f_i∇f_i' + f_i(x)∇²f_i`, plus the equality Gram matrix.
    #[default]
    Full,
    /// Drops the curvature terms `f_i(x)∇²f_i`; always positive semidefinite.
    GaussNewton,
}

/// Indices `i` with `f_i(x) ≥ 0`, sorted and free of duplicates.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ActiveIndexSet(Vec<usize>);

impl ActiveIndexSet {
    pub fn from_values(values: &DVector<f64>) -> Self {
        Self(
            values
                .iter()
                .enumerate()
                .filter(|(_, v)| **v >= 0.0)
                .map(|(i, _)| i)
                .collect(),
        )
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.0.binary_search(&i).is_ok()
    }
}

/// Inequality values `f(x)` and equality residuals `c_j'x − d_j` at a point.
#[derive(Clone, Debug, PartialEq)]
pub struct Residuals {
    pub inequality: DVector<f64>,
    pub equality: DVector<f64>,
}

impl Residuals {
    pub fn max_violation(&self) -> f64 {
        let ineq = self.inequality.iter().fold(0.0_f64, |m, v| m.max(*v));
        let eq = self.equality.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        ineq.max(eq)
    }

    pub fn merit(&self) -> f64 {
        merit_from(&self.inequality, &self.equality)
    }
}

/// The set `C = {x : f_i(x) ≤ 0, c_j'x = d_j}`.
#[derive(Clone, Debug)]
pub struct FeasibilityProblem {
    dim: usize,
    inequalities: Vec<ConvexFunction>,
    equalities: Vec<LinearEquality>,
    // Σ c_j c_j', constant part of every generalized Hessian.
    equality_gram: DMatrix<f64>,
}

impl FeasibilityProblem {
    pub fn new(
        dim: usize,
        inequalities: Vec<ConvexFunction>,
        equalities: Vec<LinearEquality>,
    ) -> Result<Self> {
        for f in &inequalities {
            check_dim(dim, f.dim())?;
        }
        for e in &equalities {
            check_dim(dim, e.coeffs.len())?;
        }
        let mut equality_gram = DMatrix::zeros(dim, dim);
        for e in &equalities {
            equality_gram.ger(1.0, &e.coeffs, &e.coeffs, 1.0);
        }
        Ok(Self {
            dim,
            inequalities,
            equalities,
            equality_gram,
        })
    }

    /// All of ℝⁿ.
    pub fn unconstrained(dim: usize) -> Self {
        Self {
            dim,
            inequalities: Vec::new(),
            equalities: Vec::new(),
            equality_gram: DMatrix::zeros(dim, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn inequalities(&self) -> &[ConvexFunction] {
        &self.inequalities
    }

    pub fn equalities(&self) -> &[LinearEquality] {
        &self.equalities
    }

    /// Copy of this problem with one more inequality appended last.
    pub fn with_inequality(&self, f: ConvexFunction) -> Result<Self> {
        check_dim(self.dim, f.dim())?;
        let mut out = self.clone();
        out.inequalities.push(f);
        Ok(out)
    }

    pub fn eval_residuals(&self, x: &DVector<f64>) -> Result<Residuals> {
        check_dim(self.dim, x.len())?;
        let mut inequality = DVector::zeros(self.inequalities.len());
        let mut equality = DVector::zeros(self.equalities.len());
        self.fill_residuals(x, &mut inequality, &mut equality);
        Ok(Residuals {
            inequality,
            equality,
        })
    }

    pub fn max_violation(&self, x: &DVector<f64>) -> Result<f64> {
        Ok(self.eval_residuals(x)?.max_violation())
    }

    /// `F(x) = ½‖f(x)₊‖² + ½Σ(c_j'x − d_j)²`.
    pub fn eval_merit(&self, x: &DVector<f64>) -> Result<f64> {
        Ok(self.eval_residuals(x)?.merit())
    }

    /// `∇F(x) = Σ f_i(x)₊∇f_i(x) + Σ(c_j'x − d_j)c_j`.
    pub fn eval_merit_gradient(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let r = self.eval_residuals(x)?;
        let mut g = DVector::zeros(self.dim);
        let mut scratch = DVector::zeros(self.dim);
        self.gradient_from(x, &r.inequality, &r.equality, &mut g, &mut scratch);
        Ok(g)
    }

    pub fn eval_generalized_hessian(&self, x: &DVector<f64>, mode: HessianMode) -> Result<DMatrix<f64>> {
        let r = self.eval_residuals(x)?;
        let mut h = DMatrix::zeros(self.dim, self.dim);
        let mut scratch = DVector::zeros(self.dim);
        self.hessian_from(x, &r.inequality, mode, &mut h, &mut scratch);
        Ok(h)
    }

    pub fn active_set(&self, x: &DVector<f64>) -> Result<ActiveIndexSet> {
        Ok(ActiveIndexSet::from_values(&self.eval_residuals(x)?.inequality))
    }

    pub(crate) fn fill_residuals(&self, x: &DVector<f64>, ineq: &mut DVector<f64>, eq: &mut DVector<f64>) {
        for (v, f) in ineq.iter_mut().zip(&self.inequalities) {
            *v = f.value(x);
        }
        for (v, e) in eq.iter_mut().zip(&self.equalities) {
            *v = e.residual(x);
        }
    }

    pub(crate) fn gradient_from(
        &self,
        x: &DVector<f64>,
        ineq: &DVector<f64>,
        eq: &DVector<f64>,
        out: &mut DVector<f64>,
        scratch: &mut DVector<f64>,
    ) {
        out.fill(0.0);
        for (f, &v) in self.inequalities.iter().zip(ineq.iter()) {
            if v > 0.0 {
                f.gradient_into(x, scratch);
                out.axpy(v, scratch, 1.0);
            }
        }
        for (e, &r) in self.equalities.iter().zip(eq.iter()) {
            out.axpy(r, &e.coeffs, 1.0);
        }
    }

    /// Generalized Hessian over the active set `{i : f_i(x) ≥ 0}`.
    pub(crate) fn hessian_from(
        &self,
        x: &DVector<f64>,
        ineq: &DVector<f64>,
        mode: HessianMode,
        out: &mut DMatrix<f64>,
        scratch: &mut DVector<f64>,
    ) {
        out.copy_from(&self.equality_gram);
        for (f, &v) in self.inequalities.iter().zip(ineq.iter()) {
            if v < 0.0 {
                continue;
            }
            f.gradient_into(x, scratch);
            out.ger(1.0, scratch, scratch, 1.0);
            if mode == HessianMode::Full {
                if let Some(q) = f.hessian() {
                    *out += q * v;
                }
            }
        }
    }
}

pub(crate) fn merit_from(ineq: &DVector<f64>, eq: &DVector<f64>) -> f64 {
    let a: f64 = ineq.iter().map(|v| v.max(0.0).powi(2)).sum();
    let b: f64 = eq.iter().map(|v| v * v).sum();
    0.5 * (a + b)
}

/// `min f_0(x) s.t. x ∈ C`.
#[derive(Clone, Debug)]
pub struct OptimizationProblem {
    objective: ConvexFunction,
    constraints: FeasibilityProblem,
}

impl OptimizationProblem {
    pub fn new(objective: ConvexFunction, constraints: FeasibilityProblem) -> Result<Self> {
        check_dim(constraints.dim(), objective.dim())?;
        Ok(Self {
            objective,
            constraints,
        })
    }

    pub fn objective(&self) -> &ConvexFunction {
        &self.objective
    }

    pub fn constraints(&self) -> &FeasibilityProblem {
        &self.constraints
    }

    pub fn dim(&self) -> usize {
        self.constraints.dim()
    }
}

pub(crate) fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    SymmetricEigen::new(m.clone())
        .eigenvalues
        .iter()
        .fold(f64::INFINITY, |a, &b| a.min(b))
}
