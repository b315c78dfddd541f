//! Instance generators and independent reference solvers shared by the
//! integration tests and the acceptance harness.
//!
//! None of the reference solvers touch the Newton machinery of the crate:
//! QPs are solved by a primal active-set method whose result is certified by
//! its KKT conditions, small QCQPs by zooming grid search, and LPs over small
//! polytopes by vertex enumeration.

#![allow(dead_code)]

use anytime_mpc::formats::{ModelData, TerminalSetFile};
use anytime_mpc::mpc::{ControllerOptions, MpcScenario};
use anytime_mpc::problem::{ConvexFunction, FeasibilityProblem, LinearEquality, OptimizationProblem};
use anytime_mpc::sim::{oscillator_scenario, oscillator_terminal_set, run_closed_loop, BudgetPolicy, SimulationRun};
use anytime_mpc::terminal::{spectral_radius, steady_state_target, ModelBounds, PolyhedralSet, SteadyStateTarget};
use nalgebra::{DMatrix, DVector};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}

pub fn random_vector(rng: &mut Rng, n: usize, lo: f64, hi: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| uniform(rng, lo, hi))
}

pub fn random_matrix(rng: &mut Rng, r: usize, c: usize, lo: f64, hi: f64) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| uniform(rng, lo, hi))
}

/// `M'M + shift·I` with entries of `M` in `[−1, 1]`.
pub fn random_psd(rng: &mut Rng, n: usize, shift: f64) -> DMatrix<f64> {
    let m = random_matrix(rng, n, n, -1.0, 1.0);
    m.transpose() * &m + DMatrix::identity(n, n) * shift
}

// ---------------------------------------------------------------------------
// Strictly convex QPs
// ---------------------------------------------------------------------------

/// `min ½x'Qx + q'x` s.t. `Ax ≤ b`, with `x_ref` strictly feasible.
#[derive(Clone, Debug)]
pub struct QpInstance {
    pub q_mat: DMatrix<f64>,
    pub q: DVector<f64>,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub x_ref: DVector<f64>,
}

impl QpInstance {
    pub fn random(rng: &mut Rng, n: usize, m: usize) -> Self {
        let q_mat = random_psd(rng, n, 0.5);
        let x_ref = random_vector(rng, n, -1.0, 1.0);
        let a = random_matrix(rng, m, n, -1.0, 1.0);
        let slack = random_vector(rng, m, 0.1, 1.0);
        let b = &a * &x_ref + slack;
        // Pull the unconstrained minimizer away so that constraints bind.
        let pull = random_vector(rng, n, -5.0, 5.0);
        let q = -(&q_mat * (&x_ref + pull));
        Self { q_mat, q, a, b, x_ref }
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.q_mat * x)) + self.q.dot(x)
    }

    pub fn problem(&self) -> OptimizationProblem {
        let n = self.q.len();
        let rows = self
            .a
            .row_iter()
            .zip(self.b.iter())
            .map(|(r, &b)| ConvexFunction::linear(r.transpose(), -b))
            .collect();
        OptimizationProblem::new(
            ConvexFunction::quadratic(self.q_mat.clone(), self.q.clone(), 0.0).unwrap(),
            FeasibilityProblem::new(n, rows, vec![]).unwrap(),
        )
        .unwrap()
    }
}

/// Solution of `min ½x'Qx + q'x` s.t. `W x = w`, with the multipliers.
fn equality_qp(q_mat: &DMatrix<f64>, q: &DVector<f64>, w: &DMatrix<f64>, rhs: &DVector<f64>) -> Option<(DVector<f64>, DVector<f64>)> {
    let (n, k) = (q.len(), rhs.len());
    let mut kkt = DMatrix::zeros(n + k, n + k);
    kkt.view_mut((0, 0), (n, n)).copy_from(q_mat);
    kkt.view_mut((n, 0), (k, n)).copy_from(w);
    kkt.view_mut((0, n), (n, k)).copy_from(&w.transpose());
    let mut r = DVector::zeros(n + k);
    r.rows_mut(0, n).copy_from(&(-q));
    r.rows_mut(n, k).copy_from(rhs);
    let sol = kkt.lu().solve(&r)?;
    Some((sol.rows(0, n).into_owned(), sol.rows(n, k).into_owned()))
}

fn select_rows(a: &DMatrix<f64>, b: &DVector<f64>, set: &[usize]) -> (DMatrix<f64>, DVector<f64>) {
    let w = DMatrix::from_fn(set.len(), a.ncols(), |i, j| a[(set[i], j)]);
    let r = DVector::from_fn(set.len(), |i, _| b[set[i]]);
    (w, r)
}

/// The randomized QP suite: sizes `n ≤ 12`, `m ≤ 24`.
pub fn qp_suite(seed: u64, count: usize) -> Vec<QpInstance> {
    let mut rng = rng(seed);
    (0..count)
        .map(|_| {
            let n = rng.random_range(1..=12);
            let m = rng.random_range(1..=24);
            QpInstance::random(&mut rng, n, m)
        })
        .collect()
}

/// KKT residuals `(primal violation, most negative multiplier, stationarity)`.
pub fn qp_kkt_residuals(inst: &QpInstance, x: &DVector<f64>, active: &[usize], mu: &DVector<f64>) -> (f64, f64, f64) {
    let viol = (&inst.a * x - &inst.b).max().max(0.0);
    let min_mu = mu.iter().copied().fold(0.0_f64, f64::min);
    let mut grad = &inst.q_mat * x + &inst.q;
    for (i, &row) in active.iter().enumerate() {
        grad += inst.a.row(row).transpose() * mu[i];
    }
    (viol, min_mu, grad.amax())
}

/// Primal active-set method started at `x_ref`; the returned optimum is
/// accepted only if it satisfies the KKT conditions to `1e-9`.
pub fn active_set_qp(inst: &QpInstance) -> (DVector<f64>, f64) {
    let (m, n) = (inst.a.nrows(), inst.a.ncols());
    let mut x = inst.x_ref.clone();
    let mut working: Vec<usize> = Vec::new();
    for _ in 0..10 * (m + n) + 100 {
        let (w, _) = select_rows(&inst.a, &inst.b, &working);
        // Step p solving the equality QP in the displacement.
        let g = &inst.q_mat * &x + &inst.q;
        let (p, mu) = equality_qp(&inst.q_mat, &g, &w, &DVector::zeros(working.len())).expect("nonsingular KKT");
        if p.amax() <= 1e-12 * (1.0 + x.amax()) {
            // With p = 0 the subproblem multipliers are those of x.
            match mu.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)) {
                Some((i, &v)) if v < -1e-12 => {
                    working.remove(i);
                }
                _ => {
                    let (viol, min_mu, stat) = qp_kkt_residuals(inst, &x, &working, &mu);
                    assert!(
                        viol <= 1e-9 && min_mu >= -1e-9 && stat <= 1e-9,
                        "active-set oracle failed to certify: {viol:e} {min_mu:e} {stat:e}"
                    );
                    return (x.clone(), inst.objective(&x));
                }
            }
        } else {
            let mut alpha = 1.0;
            let mut blocking = None;
            for i in 0..m {
                if working.contains(&i) {
                    continue;
                }
                let ap = inst.a.row(i).dot(&p.transpose());
                if ap > 1e-14 {
                    let step = (inst.b[i] - inst.a.row(i).dot(&x.transpose())) / ap;
                    if step < alpha {
                        alpha = step.max(0.0);
                        blocking = Some(i);
                    }
                }
            }
            x += &p * alpha;
            if let Some(i) = blocking {
                working.push(i);
            }
        }
    }
    panic!("active-set oracle did not terminate");
}

/// Optimum by enumerating every candidate active set of size ≤ n; only for
/// small m. Used to cross-check [`active_set_qp`].
pub fn enumerated_qp(inst: &QpInstance) -> f64 {
    let (m, n) = (inst.a.nrows(), inst.a.ncols());
    assert!(m <= 12, "enumeration is exponential in m");
    let mut best = f64::INFINITY;
    for mask in 0u32..(1 << m) {
        let set: Vec<usize> = (0..m).filter(|i| mask & (1 << i) != 0).collect();
        if set.len() > n {
            continue;
        }
        let (w, r) = select_rows(&inst.a, &inst.b, &set);
        let Some((x, mu)) = equality_qp(&inst.q_mat, &inst.q, &w, &r) else {
            continue;
        };
        let (viol, min_mu, _) = qp_kkt_residuals(inst, &x, &set, &mu);
        if viol <= 1e-9 && min_mu >= -1e-9 {
            best = best.min(inst.objective(&x));
        }
    }
    best
}

// ---------------------------------------------------------------------------
// Two-dimensional QCQPs
// ---------------------------------------------------------------------------

/// `min ½x'Qx + q'x` s.t. `½x'Px + p'x + r ≤ 0` and `lo ≤ x ≤ hi`.
#[derive(Clone, Debug)]
pub struct QcqpInstance {
    pub q_mat: DMatrix<f64>,
    pub q: DVector<f64>,
    pub p_mat: DMatrix<f64>,
    pub p: DVector<f64>,
    pub r: f64,
    pub lo: DVector<f64>,
    pub hi: DVector<f64>,
}

impl QcqpInstance {
    /// An ellipse around a point of the box, of random shape and size.
    pub fn random(rng: &mut Rng) -> Self {
        let n = 2;
        let lo = random_vector(rng, n, -2.0, -0.5);
        let hi = random_vector(rng, n, 0.5, 2.0);
        let center = DVector::from_fn(n, |i, _| uniform(rng, lo[i] + 0.2, hi[i] - 0.2));
        let p_mat = random_psd(rng, n, 0.2);
        let radius = uniform(rng, 0.1, 1.5);
        // ½(x−c)'P(x−c) ≤ ½ radius²
        let p = -(&p_mat * &center);
        let r = 0.5 * center.dot(&(&p_mat * &center)) - 0.5 * radius * radius;
        let q_mat = random_psd(rng, n, 0.1);
        let q = random_vector(rng, n, -4.0, 4.0);
        Self {
            q_mat,
            q,
            p_mat,
            p,
            r,
            lo,
            hi,
        }
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.q_mat * x)) + self.q.dot(x)
    }

    pub fn constraint(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.p_mat * x)) + self.p.dot(x) + self.r
    }

    fn feasible(&self, x: &DVector<f64>) -> bool {
        self.constraint(x) <= 0.0 && (0..2).all(|i| x[i] >= self.lo[i] && x[i] <= self.hi[i])
    }

    pub fn problem(&self) -> OptimizationProblem {
        let mut rows = vec![ConvexFunction::quadratic(self.p_mat.clone(), self.p.clone(), self.r).unwrap()];
        for i in 0..2 {
            let mut e = DVector::zeros(2);
            e[i] = 1.0;
            rows.push(ConvexFunction::linear(e.clone(), -self.hi[i]));
            rows.push(ConvexFunction::linear(-e, self.lo[i]));
        }
        OptimizationProblem::new(
            ConvexFunction::quadratic(self.q_mat.clone(), self.q.clone(), 0.0).unwrap(),
            FeasibilityProblem::new(2, rows, vec![]).unwrap(),
        )
        .unwrap()
    }
}

/// Best feasible value among the grid search and the structural candidates
/// (interior minimizer, ellipse arc, box edges).
pub fn oracle_qcqp(inst: &QcqpInstance) -> f64 {
    grid_qcqp(inst).min(candidate_qcqp(inst))
}

/// Minimum over the places an optimum can sit: the unconstrained minimizer,
/// the ellipse boundary (dense sampling refined by golden section) and each
/// box edge (a 1-D quadratic on the interval where the ellipse admits it).
pub fn candidate_qcqp(inst: &QcqpInstance) -> f64 {
    let mut best = f64::INFINITY;
    let mut consider = |x: &DVector<f64>| {
        let slack = 1e-12;
        let inside = inst.constraint(x) <= slack && (0..2).all(|i| x[i] >= inst.lo[i] - slack && x[i] <= inst.hi[i] + slack);
        if inside {
            best = best.min(inst.objective(x));
        }
    };
    if let Some(x) = inst.q_mat.clone().lu().solve(&(-&inst.q)) {
        consider(&x);
    }

    // Ellipse: x(θ) = c + ρ L (cos θ, sin θ) with L L' = P⁻¹.
    let p_inv = inst.p_mat.clone().try_inverse().expect("P is positive definite");
    let center = -(&p_inv * &inst.p);
    let rho2 = 2.0 * (0.5 * center.dot(&(&inst.p_mat * &center)) - inst.r);
    if rho2 > 0.0 {
        let l = p_inv.cholesky().expect("P⁻¹ is positive definite").l();
        let point = |th: f64| &center + &l * DVector::from_vec(vec![th.cos(), th.sin()]) * rho2.sqrt();
        let in_box = |x: &DVector<f64>| (0..2).all(|i| x[i] >= inst.lo[i] && x[i] <= inst.hi[i]);
        const SAMPLES: usize = 20_000;
        let step = std::f64::consts::TAU / SAMPLES as f64;
        let mut top = (f64::INFINITY, 0.0);
        for k in 0..SAMPLES {
            let th = k as f64 * step;
            let x = point(th);
            if in_box(&x) && inst.objective(&x) < top.0 {
                top = (inst.objective(&x), th);
            }
        }
        if top.0.is_finite() {
            let (mut a, mut b) = (top.1 - step, top.1 + step);
            let g = 0.5 * (5f64.sqrt() - 1.0);
            for _ in 0..100 {
                let (c, d) = (b - g * (b - a), a + g * (b - a));
                if inst.objective(&point(c)) < inst.objective(&point(d)) {
                    b = d;
                } else {
                    a = c;
                }
            }
            let x = point(0.5 * (a + b));
            if in_box(&x) {
                consider(&x);
            }
            consider(&point(top.1));
        }
    }

    // Box edges: coordinate k fixed, the other one s free.
    for k in 0..2 {
        let o = 1 - k;
        for fixed in [inst.lo[k], inst.hi[k]] {
            let at = |s: f64| {
                let mut x = DVector::zeros(2);
                x[k] = fixed;
                x[o] = s;
                x
            };
            // Constraint along the edge: α s² + β s + γ ≤ 0.
            let alpha = 0.5 * inst.p_mat[(o, o)];
            let beta = inst.p_mat[(o, k)] * fixed + inst.p[o];
            let gamma = 0.5 * inst.p_mat[(k, k)] * fixed * fixed + inst.p[k] * fixed + inst.r;
            let disc = beta * beta - 4.0 * alpha * gamma;
            if disc < 0.0 {
                continue;
            }
            let s_lo = ((-beta - disc.sqrt()) / (2.0 * alpha)).max(inst.lo[o]);
            let s_hi = ((-beta + disc.sqrt()) / (2.0 * alpha)).min(inst.hi[o]);
            if s_lo > s_hi {
                continue;
            }
            let s_star = -(inst.q_mat[(o, k)] * fixed + inst.q[o]) / inst.q_mat[(o, o)];
            for s in [s_lo, s_hi, s_star.clamp(s_lo, s_hi)] {
                consider(&at(s));
            }
        }
    }
    best
}

/// Best feasible grid value after repeatedly zooming a 201×201 grid onto the
/// incumbent. The zoom can stall short of optima in narrow corners, so it
/// serves as a cross-check on [`candidate_qcqp`].
pub fn grid_qcqp(inst: &QcqpInstance) -> f64 {
    const POINTS: usize = 201;
    let mut lo = inst.lo.clone();
    let mut hi = inst.hi.clone();
    let mut best = (f64::INFINITY, DVector::zeros(2));
    for _ in 0..12 {
        let h = (&hi - &lo) / (POINTS - 1) as f64;
        for i in 0..POINTS {
            for j in 0..POINTS {
                let x = DVector::from_vec(vec![lo[0] + h[0] * i as f64, lo[1] + h[1] * j as f64]);
                if inst.feasible(&x) {
                    let v = inst.objective(&x);
                    if v < best.0 {
                        best = (v, x);
                    }
                }
            }
        }
        assert!(best.0.is_finite(), "grid found no feasible point");
        // Zoom to ten cells around the incumbent, staying inside the box.
        for k in 0..2 {
            let half = 10.0 * h[k];
            lo[k] = (best.1[k] - half).max(inst.lo[k]);
            hi[k] = (best.1[k] + half).min(inst.hi[k]);
        }
    }
    best.0
}

// ---------------------------------------------------------------------------
// Feasibility instances
// ---------------------------------------------------------------------------

fn box_rows(lo: &DVector<f64>, hi: &DVector<f64>) -> Vec<ConvexFunction> {
    let n = lo.len();
    let mut rows = Vec::with_capacity(2 * n);
    for i in 0..n {
        let mut e = DVector::zeros(n);
        e[i] = 1.0;
        rows.push(ConvexFunction::linear(e.clone(), -hi[i]));
        rows.push(ConvexFunction::linear(-e, lo[i]));
    }
    rows
}

/// Two boxes separated along a random coordinate by a gap of at least 0.1.
pub fn disjoint_boxes(rng: &mut Rng) -> FeasibilityProblem {
    let n = rng.random_range(1..=6);
    let axis = rng.random_range(0..n);
    let lo1 = random_vector(rng, n, -3.0, -1.0);
    let mut hi1 = random_vector(rng, n, 1.0, 3.0);
    let mut lo2 = random_vector(rng, n, -3.0, -1.0);
    let hi2 = random_vector(rng, n, 1.0, 3.0);
    hi1[axis] = uniform(rng, -1.0, 0.5);
    lo2[axis] = hi1[axis] + uniform(rng, 0.1, 1.0);
    let mut rows = box_rows(&lo1, &hi1);
    rows.extend(box_rows(&lo2, &hi2));
    FeasibilityProblem::new(n, rows, vec![]).unwrap()
}

/// `a'x ≤ b` together with `a'x ≥ b + gap`, plus some harmless rows.
pub fn contradictory_halfspaces(rng: &mut Rng) -> FeasibilityProblem {
    let n = rng.random_range(1..=6);
    let a = random_vector(rng, n, -2.0, 2.0);
    let b = uniform(rng, -1.0, 1.0);
    let gap = uniform(rng, 0.05, 1.0);
    let mut rows = vec![ConvexFunction::linear(a.clone(), -b), ConvexFunction::linear(-a, b + gap)];
    for _ in 0..rng.random_range(0..4) {
        let c = random_vector(rng, n, -1.0, 1.0);
        rows.push(ConvexFunction::linear(c, -10.0));
    }
    FeasibilityProblem::new(n, rows, vec![]).unwrap()
}

/// A ball and a halfspace that misses it.
pub fn ball_outside_halfspace(rng: &mut Rng) -> FeasibilityProblem {
    let n = rng.random_range(1..=5);
    let center = random_vector(rng, n, -1.0, 1.0);
    let radius = uniform(rng, 0.2, 1.0);
    let dir = random_vector(rng, n, -1.0, 1.0).normalize();
    // dir'x ≥ dir'center + radius + gap
    let gap = uniform(rng, 0.05, 0.5);
    let ball = ConvexFunction::centered_quadratic(&DMatrix::identity(n, n), &center, -radius * radius).unwrap();
    let half = ConvexFunction::linear(-&dir, dir.dot(&center) + radius + gap);
    FeasibilityProblem::new(n, vec![ball, half], vec![]).unwrap()
}

/// Quadratic and affine rows with slack at a reference point, plus one
/// equality through it; returns the problem and the reference point.
pub fn feasible_instance(rng: &mut Rng) -> (FeasibilityProblem, DVector<f64>) {
    let n = rng.random_range(1..=10);
    let m = rng.random_range(1..=20);
    let x_ref = random_vector(rng, n, -1.0, 1.0);
    let mut rows = Vec::with_capacity(m);
    for i in 0..m {
        let slack = uniform(rng, 0.05, 1.0);
        if i % 3 == 0 {
            let p = random_psd(rng, n, 0.1);
            let lin = random_vector(rng, n, -1.0, 1.0);
            let f = ConvexFunction::quadratic(p, lin, 0.0).unwrap();
            let c = -f.value(&x_ref) - slack;
            rows.push(ConvexFunction::quadratic(f.hessian().unwrap().clone(), f.linear_part().clone(), c).unwrap());
        } else {
            let a = random_vector(rng, n, -1.0, 1.0);
            rows.push(ConvexFunction::linear(a.clone(), -a.dot(&x_ref) - slack));
        }
    }
    let c = random_vector(rng, n, -1.0, 1.0);
    let eq = vec![LinearEquality::new(c.clone(), c.dot(&x_ref))];
    (FeasibilityProblem::new(n, rows, eq).unwrap(), x_ref)
}

/// Random quadratic and affine rows with entries in `[−10, 10]`, plus
/// equalities; used for derivative checks.
pub fn derivative_instance(rng: &mut Rng) -> FeasibilityProblem {
    let n = rng.random_range(1..=4);
    let m = rng.random_range(1..=6);
    let mut rows = Vec::with_capacity(m);
    for i in 0..m {
        let lin = random_vector(rng, n, -10.0, 10.0);
        let c = uniform(rng, -10.0, 10.0);
        if i % 2 == 0 {
            let mut q = random_psd(rng, n, 0.0);
            q *= 10.0 / q.amax().max(1.0);
            rows.push(ConvexFunction::quadratic(q, lin, c).unwrap());
        } else {
            rows.push(ConvexFunction::linear(lin, c));
        }
    }
    let eqs = (0..rng.random_range(0..=2))
        .map(|_| LinearEquality::new(random_vector(rng, n, -10.0, 10.0), uniform(rng, -10.0, 10.0)))
        .collect();
    FeasibilityProblem::new(n, rows, eqs).unwrap()
}

/// Central difference of `f` at `x` along every coordinate.
pub fn fd_gradient(f: impl Fn(&DVector<f64>) -> f64, x: &DVector<f64>, h: f64) -> DVector<f64> {
    DVector::from_fn(x.len(), |i, _| {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[i] += h;
        xm[i] -= h;
        (f(&xp) - f(&xm)) / (2.0 * h)
    })
}

// ---------------------------------------------------------------------------
// Polytopes
// ---------------------------------------------------------------------------

/// `max c'x` over the bounded polytope `{Hx ≤ k}` in ℝⁿ, n ≤ 3, by vertex
/// enumeration.
pub fn vertex_lp_max(h: &DMatrix<f64>, k: &DVector<f64>, c: &DVector<f64>) -> f64 {
    let (rows, n) = (h.nrows(), h.ncols());
    assert!(n <= 3);
    let mut best = f64::NEG_INFINITY;
    let mut idx = vec![0usize; n];
    fn next(idx: &mut [usize], rows: usize) -> bool {
        let n = idx.len();
        let mut i = n;
        while i > 0 {
            i -= 1;
            if idx[i] < rows - (n - i) {
                idx[i] += 1;
                for j in i + 1..n {
                    idx[j] = idx[j - 1] + 1;
                }
                return true;
            }
        }
        false
    }
    for (i, v) in idx.iter_mut().enumerate() {
        *v = i;
    }
    loop {
        let sub = DMatrix::from_fn(n, n, |i, j| h[(idx[i], j)]);
        let rhs = DVector::from_fn(n, |i, _| k[idx[i]]);
        if sub.determinant().abs() > 1e-10 {
            if let Some(x) = sub.lu().solve(&rhs) {
                let slack = (h * &x - k).max();
                if slack <= 1e-9 * (1.0 + k.amax()) {
                    best = best.max(c.dot(&x));
                }
            }
        }
        if !next(&mut idx, rows) {
            break;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// Terminal sets
// ---------------------------------------------------------------------------

/// Points with `Δx'PΔx = ρ` spread over the boundary.
pub fn boundary_points(rng: &mut Rng, p: &DMatrix<f64>, rho: f64, count: usize) -> Vec<DVector<f64>> {
    let l = p.clone().cholesky().unwrap().l();
    let lt_inv = l.transpose().try_inverse().unwrap();
    (0..count)
        .map(|_| {
            let w = random_vector(rng, p.nrows(), -1.0, 1.0);
            let w = &w / w.norm();
            &lt_inv * w * rho.sqrt()
        })
        .collect()
}

/// Largest violation of the constraints a terminal state `x_r + Δx` must
/// meet under `u = u_r + KΔx`, evaluated directly on the model.
pub fn terminal_violation(bounds: &ModelBounds<'_>, k: &DMatrix<f64>, r: &DVector<f64>, dx: &DVector<f64>) -> f64 {
    let t = steady_state_target(bounds.a, bounds.b, bounds.c, r).unwrap();
    let x = &t.x_r + dx;
    let u = &t.u_r + k * dx;
    let x_next = bounds.a * &x + bounds.b * &u;
    let y_next = bounds.c * &x_next;
    let mut worst = f64::NEG_INFINITY;
    for i in 0..u.len() {
        worst = worst.max(u[i] - bounds.u_max[i]).max(bounds.u_min[i] - u[i]);
    }
    for i in 0..y_next.len() {
        worst = worst.max(y_next[i] - bounds.y_max[i]).max(bounds.y_min[i] - y_next[i]);
    }
    let s = bounds.s * dx - bounds.s_rhs;
    s.iter().fold(worst, |w, v| w.max(*v))
}

/// Checks `max_{x ∈ set} row'x ≤ rhs` for every admissible row and for every
/// facet mapped through the dynamics, by vertex enumeration, and that no facet
/// is redundant. Returns the failed checks.
pub fn polyhedron_defects(set: &PolyhedralSet, a_cl: &DMatrix<f64>, a_bar: &DMatrix<f64>, b_bar: &DVector<f64>) -> Vec<String> {
    let tol = 1e-7;
    let mut defects = Vec::new();
    for (row, &b) in a_bar.row_iter().zip(b_bar.iter()) {
        let max = vertex_lp_max(&set.h, &set.k, &row.transpose());
        if max > b + tol {
            defects.push(format!("admissible row exceeded: {max} > {b}"));
        }
    }
    let mapped = &set.h * a_cl;
    for (row, &k) in mapped.row_iter().zip(set.k.iter()) {
        let max = vertex_lp_max(&set.h, &set.k, &row.transpose());
        if max > k + tol {
            defects.push(format!("invariance violated: {max} > {k}"));
        }
    }
    // No facet is implied by the others; a far box keeps the remainder
    // bounded so that vertex enumeration applies.
    let n = set.h.ncols();
    for i in 0..set.h.nrows() {
        let rest = set.h.clone().remove_row(i);
        let rest_k = set.k.clone().remove_row(i);
        let far = DMatrix::identity(n, n) * 1e6;
        let rest = DMatrix::from_fn(rest.nrows() + 2 * n, n, |r, c| {
            if r < rest.nrows() {
                rest[(r, c)]
            } else if r < rest.nrows() + n {
                far[(r - rest.nrows(), c)] / 1e6
            } else {
                -far[(r - rest.nrows() - n, c)] / 1e6
            }
        });
        let rest_k = DVector::from_fn(rest.nrows(), |r, _| if r < rest_k.len() { rest_k[r] } else { 1e6 });
        let max = vertex_lp_max(&rest, &rest_k, &set.h.row(i).transpose());
        if max <= set.k[i] + 1e-9 {
            defects.push(format!("facet {i} is redundant"));
        }
    }
    defects
}

pub fn random_stable(rng: &mut Rng, n: usize, radius: f64) -> DMatrix<f64> {
    let m = random_matrix(rng, n, n, -1.0, 1.0);
    let rho = spectral_radius(&m);
    m * (radius / rho)
}

// ---------------------------------------------------------------------------
// Closed loop
// ---------------------------------------------------------------------------

pub const BUDGET_GRID: [Option<usize>; 5] = [Some(0), Some(5), Some(20), Some(100), None];

pub fn policy(budget: Option<usize>) -> BudgetPolicy {
    budget.map_or(BudgetPolicy::Unbounded, BudgetPolicy::Iterations)
}

pub fn oscillator(polyhedral: bool) -> (ModelData, MpcScenario, SteadyStateTarget) {
    let model = oscillator_scenario().model().unwrap();
    let set: TerminalSetFile = oscillator_terminal_set(polyhedral);
    let (scenario, target) = model.scenario(&set).unwrap();
    (model, scenario, target)
}

pub fn oscillator_run(polyhedral: bool, budget: Option<usize>, steps: usize) -> SimulationRun {
    let (model, scenario, target) = oscillator(polyhedral);
    run_closed_loop(&scenario, &target, &ControllerOptions::default(), policy(budget), steps, &model.x0).unwrap()
}

/// Violations of the closed-loop guarantees in a recorded run, recomputed
/// from the recorded states and inputs only.
pub fn anytime_violations(scenario: &MpcScenario, run: &SimulationRun) -> Vec<String> {
    let mut out = Vec::new();
    for r in &run.records {
        let u_viol = (&r.u - &scenario.u_max).max().max((&scenario.u_min - &r.u).max());
        let y = &scenario.c * &r.x;
        let y_viol = (&y - &scenario.y_max).max().max((&scenario.y_min - &y).max());
        if r.t > 0 && y_viol > 1e-6 {
            out.push(format!("t={}: output bound violated by {y_viol:e}", r.t));
        }
        if u_viol > 1e-6 {
            out.push(format!("t={}: input bound violated by {u_viol:e}", r.t));
        }
    }
    for w in run.records.windows(2) {
        let f_next = scenario.terminal.value(&w[1].x).max(0.0);
        if (f_next - w[1].f_plus).abs() > 1e-12 {
            out.push(format!("t={}: recorded f_plus disagrees with the state", w[1].t));
        }
        if w[1].phi > w[0].phi - f_next + 1e-8 {
            out.push(format!(
                "t={}: φ rose from {:e} to {:e} with f₊ = {f_next:e}",
                w[1].t, w[0].phi, w[1].phi
            ));
        }
    }
    let settled = run.records.iter().rposition(|r| r.f_plus > 1e-4).map_or(0, |i| i + 1);
    if settled > 100 || settled >= run.records.len() {
        out.push(format!("f₊ above 1e-4 until step {settled}"));
    }
    out
}
