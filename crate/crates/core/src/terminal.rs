//! Terminal sets and the data needed to build them.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};
use crate::opt::{initial_bounds, solve, OptOptions};
use crate::problem::{ConvexFunction, FeasibilityProblem, OptimizationProblem};

/// Steady state `(x_r, u_r)` producing output `r`.
#[derive(Clone, Debug, PartialEq)]
pub struct SteadyStateTarget {
    pub x_r: DVector<f64>,
    pub u_r: DVector<f64>,
    pub r: DVector<f64>,
}

/// Solves `(A − I)x_r + B u_r = 0`, `C x_r = r`.
pub fn steady_state_target(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    c: &DMatrix<f64>,
    r: &DVector<f64>,
) -> Result<SteadyStateTarget> {
    let (n, m, p) = (a.nrows(), b.ncols(), c.nrows());
    check_dim(p, r.len())?;
    if p != m {
        return Err(Error::SingularSystem(format!(
            "steady-state system is {}x{}, not square",
            n + p,
            n + m
        )));
    }
    let mut lhs = DMatrix::zeros(n + p, n + m);
    lhs.view_mut((0, 0), (n, n)).copy_from(&(a - DMatrix::identity(n, n)));
    lhs.view_mut((0, n), (n, m)).copy_from(b);
    lhs.view_mut((n, 0), (p, n)).copy_from(c);
    let mut rhs = DVector::zeros(n + p);
    rhs.rows_mut(n, p).copy_from(r);
    let sol = lhs
        .lu()
        .solve(&rhs)
        .filter(|s| s.iter().all(|v| v.is_finite()))
        .ok_or_else(|| Error::SingularSystem("reference is not trackable".into()))?;
    Ok(SteadyStateTarget {
        x_r: sol.rows(0, n).into_owned(),
        u_r: sol.rows(n, m).into_owned(),
        r: r.clone(),
    })
}

/// `{x : (x − x_r)'P(x − x_r) ≤ ρ}`.
#[derive(Clone, Debug, PartialEq)]
pub struct EllipsoidSet {
    pub p: DMatrix<f64>,
    pub rho: f64,
    pub center: DVector<f64>,
}

impl EllipsoidSet {
    pub fn value(&self, x: &DVector<f64>) -> f64 {
        let d = x - &self.center;
        d.dot(&(&self.p * &d)) - self.rho
    }
}

/// `{x : H(x − x_r) ≤ k}`.
#[derive(Clone, Debug, PartialEq)]
pub struct PolyhedralSet {
    pub h: DMatrix<f64>,
    pub k: DVector<f64>,
    pub center: DVector<f64>,
}

impl PolyhedralSet {
    pub fn new(h: DMatrix<f64>, k: DVector<f64>, center: DVector<f64>) -> Result<Self> {
        check_dim(h.nrows(), k.len())?;
        check_dim(h.ncols(), center.len())?;
        if k.iter().any(|v| *v <= 0.0) {
            return Err(Error::InvalidArgument("polyhedron offsets must be positive".into()));
        }
        if h.row_iter().any(|row| row.iter().all(|v| *v == 0.0)) {
            return Err(Error::InvalidArgument("polyhedron has a zero facet row".into()));
        }
        Ok(Self { h, k, center })
    }

    pub fn facets(&self) -> usize {
        self.h.nrows()
    }

    pub fn value(&self, x: &DVector<f64>) -> f64 {
        let d = &self.h * (x - &self.center) - &self.k;
        d.max()
    }

    pub fn with_center(mut self, center: DVector<f64>) -> Self {
        self.center = center;
        self
    }
}

/// Target set `𝒮 = {f(x) ≤ 0}` used as the MPC terminal constraint.
#[derive(Clone, Debug, PartialEq)]
pub enum TerminalSet {
    Ellipsoid(EllipsoidSet),
    Polyhedron(PolyhedralSet),
}

impl TerminalSet {
    /// `f(x)`: `(x−x_r)'P(x−x_r) − ρ` or `max_i H_i(x − x_r) − k_i`.
    pub fn value(&self, x: &DVector<f64>) -> f64 {
        match self {
            TerminalSet::Ellipsoid(e) => e.value(x),
            TerminalSet::Polyhedron(p) => p.value(x),
        }
    }

    pub fn center(&self) -> &DVector<f64> {
        match self {
            TerminalSet::Ellipsoid(e) => &e.center,
            TerminalSet::Polyhedron(p) => &p.center,
        }
    }

    pub fn dim(&self) -> usize {
        self.center().len()
    }

    /// The convex pieces whose maximum is `f`, as functions of the state.
    pub fn pieces(&self) -> Vec<ConvexFunction> {
        match self {
            TerminalSet::Ellipsoid(e) => vec![ConvexFunction::centered_quadratic(&e.p, &e.center, -e.rho)
                .expect("ellipsoid shape matrix is square and PSD")],
            TerminalSet::Polyhedron(p) => p
                .h
                .row_iter()
                .zip(p.k.iter())
                .map(|(row, &k)| {
                    let a = row.transpose();
                    let c = -a.dot(&p.center) - k;
                    ConvexFunction::linear(a, c)
                })
                .collect(),
        }
    }
}

/// Constraint rows `Ā Δx ≤ b̄` that the terminal feedback must respect:
/// input bounds through `K`, next-output bounds through `C(A + BK)`, and the
/// target-set rows `S`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdmissibleRows {
    pub a_bar: DMatrix<f64>,
    pub b_bar: DVector<f64>,
}

/// Data of the linear model and its constraint boxes needed by this module.
#[derive(Clone, Debug)]
pub struct ModelBounds<'a> {
    pub a: &'a DMatrix<f64>,
    pub b: &'a DMatrix<f64>,
    pub c: &'a DMatrix<f64>,
    pub u_min: &'a DVector<f64>,
    pub u_max: &'a DVector<f64>,
    pub y_min: &'a DVector<f64>,
    pub y_max: &'a DVector<f64>,
    pub s: &'a DMatrix<f64>,
    pub s_rhs: &'a DVector<f64>,
}

fn stacked_rows(bounds: &ModelBounds<'_>, gain: &DMatrix<f64>) -> DMatrix<f64> {
    let (m, n, p) = (gain.nrows(), gain.ncols(), bounds.c.nrows());
    let nt = bounds.s.nrows();
    let out_rows = bounds.c * (bounds.a + bounds.b * gain);
    let mut a_bar = DMatrix::zeros(2 * m + 2 * p + nt, n);
    a_bar.view_mut((0, 0), (m, n)).copy_from(gain);
    a_bar.view_mut((m, 0), (m, n)).copy_from(&(-gain));
    a_bar.view_mut((2 * m, 0), (p, n)).copy_from(&out_rows);
    a_bar.view_mut((2 * m + p, 0), (p, n)).copy_from(&(-&out_rows));
    a_bar.view_mut((2 * m + 2 * p, 0), (nt, n)).copy_from(bounds.s);
    a_bar
}

fn stacked_rhs(bounds: &ModelBounds<'_>, u_r: &DVector<f64>, r: &DVector<f64>) -> DVector<f64> {
    let (m, p, nt) = (u_r.len(), r.len(), bounds.s_rhs.len());
    let mut b_bar = DVector::zeros(2 * m + 2 * p + nt);
    b_bar.rows_mut(0, m).copy_from(&(bounds.u_max - u_r));
    b_bar.rows_mut(m, m).copy_from(&(-bounds.u_min + u_r));
    b_bar.rows_mut(2 * m, p).copy_from(&(bounds.y_max - r));
    b_bar.rows_mut(2 * m + p, p).copy_from(&(-bounds.y_min + r));
    b_bar.rows_mut(2 * m + 2 * p, nt).copy_from(bounds.s_rhs);
    b_bar
}

/// Rows for one reference `r`.
pub fn admissible_rows(bounds: &ModelBounds<'_>, gain: &DMatrix<f64>, r: &DVector<f64>) -> Result<AdmissibleRows> {
    let target = steady_state_target(bounds.a, bounds.b, bounds.c, r)?;
    Ok(AdmissibleRows {
        a_bar: stacked_rows(bounds, gain),
        b_bar: stacked_rhs(bounds, &target.u_r, r),
    })
}

/// Rows valid for every reference in the polytope with the given vertices:
/// each right-hand side is the minimum over the vertices.
pub fn robust_admissible_rows(
    bounds: &ModelBounds<'_>,
    gain: &DMatrix<f64>,
    vertices: &[DVector<f64>],
) -> Result<AdmissibleRows> {
    if vertices.is_empty() {
        return Err(Error::InvalidArgument("reference polytope has no vertices".into()));
    }
    let mut b_min: Option<DVector<f64>> = None;
    for r in vertices {
        let rows = admissible_rows(bounds, gain, r)?;
        b_min = Some(match b_min {
            None => rows.b_bar,
            Some(b) => b.zip_map(&rows.b_bar, f64::min),
        });
    }
    Ok(AdmissibleRows {
        a_bar: stacked_rows(bounds, gain),
        b_bar: b_min.expect("at least one vertex"),
    })
}

/// Largest `ρ` such that `{Δx'PΔx ≤ ρ}` satisfies every admissible row:
/// `ρ = min_i b̄_i² / (Ā_i P⁻¹ Ā_i')`.
pub fn ellipsoid_rho(p: &DMatrix<f64>, rows: &AdmissibleRows) -> Result<f64> {
    check_dim(p.nrows(), rows.a_bar.ncols())?;
    let q = p
        .clone()
        .cholesky()
        .ok_or_else(|| Error::InvalidArgument("ellipsoid shape matrix is not positive definite".into()))?
        .inverse();
    let mut rho = f64::INFINITY;
    for (row, &b) in rows.a_bar.row_iter().zip(rows.b_bar.iter()) {
        if b <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "target violates an admissible row (b = {b:e})"
            )));
        }
        let a = row.transpose();
        let denom = a.dot(&(&q * &a));
        if denom <= 1e-14 {
            continue;
        }
        rho = rho.min(b * b / denom);
    }
    Ok(rho)
}

/// Largest-level ellipsoid for reference `r` around its steady state.
pub fn ellipsoid_for_reference(
    p: &DMatrix<f64>,
    gain: &DMatrix<f64>,
    bounds: &ModelBounds<'_>,
    r: &DVector<f64>,
) -> Result<EllipsoidSet> {
    let rows = admissible_rows(bounds, gain, r)?;
    let rho = ellipsoid_rho(p, &rows)?;
    let target = steady_state_target(bounds.a, bounds.b, bounds.c, r)?;
    Ok(EllipsoidSet {
        p: p.clone(),
        rho,
        center: target.x_r,
    })
}

const MAX_INVARIANT_STEPS: usize = 500;

fn redundancy_tolerance(row: &DVector<f64>, rhs: f64) -> f64 {
    1e-7 * row.norm().max(1.0) * rhs.abs().max(1.0)
}

/// Upper bound on `max c'x` over `{Hx ≤ k}`; `None` when the maximum is unbounded.
pub fn support_upper_bound(h: &DMatrix<f64>, k: &DVector<f64>, c: &DVector<f64>) -> Result<Option<f64>> {
    let n = h.ncols();
    let rows = h
        .row_iter()
        .zip(k.iter())
        .map(|(row, &b)| ConvexFunction::linear(row.transpose(), -b))
        .collect();
    let opt = OptimizationProblem::new(ConvexFunction::linear(-c, 0.0), FeasibilityProblem::new(n, rows, vec![])?)?;
    let options = OptOptions {
        eps: 1e-9,
        relative_eps: Some(1e-10),
        ..Default::default()
    };
    let (bracket, _) = match initial_bounds(&opt, &DVector::zeros(n), &options) {
        Ok(b) => b,
        Err(Error::NoLowerBound) => return Ok(None),
        Err(e) => return Err(e),
    };
    let res = solve(&opt, &options, bracket)?;
    Ok(Some(-res.bracket.t_minus))
}

fn is_redundant(h: &DMatrix<f64>, k: &DVector<f64>, row: &DVector<f64>, rhs: f64) -> Result<bool> {
    Ok(match support_upper_bound(h, k, row)? {
        Some(max) => max <= rhs + redundancy_tolerance(row, rhs),
        None => false,
    })
}

fn is_duplicate(h: &DMatrix<f64>, k: &DVector<f64>, row: &DVector<f64>, rhs: f64) -> bool {
    let norm = row.norm();
    let (row_n, rhs_n) = (row / norm, rhs / norm);
    h.row_iter().zip(k.iter()).any(|(other, &b)| {
        let on = other.norm();
        let diff = (other.transpose() / on - &row_n).amax();
        diff <= 1e-9 && (b / on - rhs_n).abs() <= 1e-9
    })
}

/// Maximal admissible invariant set `{Δx : Ā A_cl^j Δx ≤ b̄ ∀j ≥ 0}` of the
/// autonomous system `Δx⁺ = A_cl Δx`, centered at the origin.
///
/// Rows of `Ā A_cl^{j}` are appended while some is not implied by the rows
/// collected so far; rows implied by the others are removed at the end.
pub fn max_admissible_polyhedron(a_cl: &DMatrix<f64>, a_bar: &DMatrix<f64>, b_bar: &DVector<f64>) -> Result<PolyhedralSet> {
    let n = a_cl.nrows();
    check_dim(n, a_bar.ncols())?;
    check_dim(a_bar.nrows(), b_bar.len())?;
    if b_bar.iter().any(|v| *v <= 0.0) {
        return Err(Error::InvalidArgument("admissible offsets must be positive".into()));
    }

    let mut h = DMatrix::<f64>::zeros(0, n);
    let mut k = DVector::<f64>::zeros(0);
    let push = |h: &mut DMatrix<f64>, k: &mut DVector<f64>, row: &DVector<f64>, rhs: f64| {
        let r = h.nrows();
        *h = h.clone().insert_row(r, 0.0);
        h.row_mut(r).copy_from(&row.transpose());
        *k = k.clone().insert_row(r, rhs);
    };
    for (row, &b) in a_bar.row_iter().zip(b_bar.iter()) {
        let row = row.transpose();
        if row.iter().all(|v| *v == 0.0) || is_duplicate(&h, &k, &row, b) {
            continue;
        }
        push(&mut h, &mut k, &row, b);
    }

    let mut power = a_cl.clone();
    let mut converged = false;
    for _ in 0..MAX_INVARIANT_STEPS {
        let candidates = a_bar * &power;
        let mut added = false;
        for (row, &b) in candidates.row_iter().zip(b_bar.iter()) {
            let row = row.transpose();
            if row.amax() <= 1e-14 * b || is_duplicate(&h, &k, &row, b) {
                continue;
            }
            if !is_redundant(&h, &k, &row, b)? {
                push(&mut h, &mut k, &row, b);
                added = true;
            }
        }
        if !added {
            converged = true;
            break;
        }
        power = &power * a_cl;
    }
    if !converged {
        return Err(Error::IterationCap(MAX_INVARIANT_STEPS));
    }

    let mut i = 0;
    while i < h.nrows() {
        let row = h.row(i).transpose();
        let rest_h = h.clone().remove_row(i);
        let rest_k = k.clone().remove_row(i);
        if rest_h.nrows() > 0 && is_redundant(&rest_h, &rest_k, &row, k[i])? {
            h = rest_h;
            k = rest_k;
        } else {
            i += 1;
        }
    }
    PolyhedralSet::new(h, k, DVector::zeros(n))
}

/// λ-contractive variant: the invariant set of `A_cl / λ`.
pub fn max_contractive_polyhedron(
    a_cl: &DMatrix<f64>,
    a_bar: &DMatrix<f64>,
    b_bar: &DVector<f64>,
    lambda: f64,
) -> Result<PolyhedralSet> {
    if !(lambda > 0.0 && lambda <= 1.0) {
        return Err(Error::InvalidArgument(format!("contraction factor must lie in (0, 1], got {lambda}")));
    }
    max_admissible_polyhedron(&(a_cl / lambda), a_bar, b_bar)
}

const DARE_MAX_ITERATIONS: usize = 100_000;

/// Stabilizing solution of `P = Q + A'PA − A'PB(R + B'PB)⁻¹B'PA` by fixed-point
/// iteration from `P = Q`, and the gain `K = −(R + B'PB)⁻¹B'PA`.
pub fn dare_lqr(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = a.nrows();
    check_dim(n, a.ncols())?;
    check_dim(n, b.nrows())?;
    check_dim(b.ncols(), r.nrows())?;
    let gain_of = |p: &DMatrix<f64>| -> Result<DMatrix<f64>> {
        let btp = b.transpose() * p;
        let s = r + &btp * b;
        let chol = s.cholesky().ok_or(Error::RiccatiDiverged)?;
        Ok(-chol.solve(&(btp * a)))
    };
    let mut p = q.clone();
    let mut converged = false;
    for _ in 0..DARE_MAX_ITERATIONS {
        let k = gain_of(&p)?;
        // A'P(A + BK) + Q equals the Riccati map for the optimal K.
        let mut next = a.transpose() * &p * (a + b * &k) + q;
        next = (&next + next.transpose()) * 0.5;
        if !next.iter().all(|v| v.is_finite()) || next.amax() > 1e15 {
            return Err(Error::RiccatiDiverged);
        }
        let change = (&next - &p).amax();
        p = next;
        if change <= 1e-12 * p.amax().max(1e-300) {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::RiccatiDiverged);
    }
    let k = gain_of(&p)?;
    if spectral_radius(&(a + b * &k)) >= 1.0 {
        return Err(Error::RiccatiDiverged);
    }
    Ok((p, k))
}

pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}
