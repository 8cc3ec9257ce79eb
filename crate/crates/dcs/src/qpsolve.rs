//! Convex quadratic programming by operator splitting.
//!
//! Solves
//!
//! ```text
//!   minimize    0.5 x'Px + q'x            (P symmetric PSD)
//!   subject to  A_eq x  = b_eq
//!               A_in x <= b_in
//! ```
//!
//! with a splitting method in the style of OSQP: the constraints are folded
//! into a box `l <= Ax <= u`, the iteration alternates a regularized KKT
//! solve with a projection onto the box, and the data is Ruiz-equilibrated
//! up front so one penalty parameter works across badly scaled rows.
//! Convergence is declared on unscaled KKT residuals; an active-set "polish"
//! then re-solves the equality-constrained problem on the identified active
//! rows, which typically sharpens the answer to near machine precision.
//! Primal infeasibility is detected through the usual certificate carried by
//! the dual increments. The solver is deterministic: no randomization,
//! factorization order fixed by the data.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};

/// Problem data in standard form. `P` must be symmetric PSD; only the
/// objective needs it, feasibility is purely linear.
#[derive(Clone, Debug)]
pub struct QpProblem {
    pub p: DMatrix<f64>,
    pub q: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    pub a_in: DMatrix<f64>,
    pub b_in: DVector<f64>,
    /// Constant added to the reported objective value.
    pub obj_const: f64,
}

impl QpProblem {
    pub fn new(
        p: DMatrix<f64>,
        q: DVector<f64>,
        a_eq: DMatrix<f64>,
        b_eq: DVector<f64>,
        a_in: DMatrix<f64>,
        b_in: DVector<f64>,
    ) -> Result<Self> {
        let n = p.nrows();
        if n == 0 || p.ncols() != n {
            return Err(Error::dims(
                "QpProblem::new",
                "square nonempty P".to_string(),
                format!("{}x{}", p.nrows(), p.ncols()),
            ));
        }
        let scale = inf_norm_mat(&p).max(1.0);
        for i in 0..n {
            for j in 0..i {
                if (p[(i, j)] - p[(j, i)]).abs() > 1e-8 * scale {
                    return Err(Error::dims(
                        "QpProblem::new",
                        "symmetric P".to_string(),
                        format!("P[{i},{j}] != P[{j},{i}]"),
                    ));
                }
            }
        }
        let check = |name: &'static str, rows: usize, cols: usize, rhs: usize| -> Result<()> {
            if cols != n || rows != rhs {
                return Err(Error::dims(
                    name,
                    format!("rows x {n} with matching rhs"),
                    format!("{rows}x{cols} vs rhs {rhs}"),
                ));
            }
            Ok(())
        };
        check("QpProblem a_eq", a_eq.nrows(), if a_eq.nrows() == 0 { n } else { a_eq.ncols() }, b_eq.len())?;
        check("QpProblem a_in", a_in.nrows(), if a_in.nrows() == 0 { n } else { a_in.ncols() }, b_in.len())?;
        if q.len() != n {
            return Err(Error::dims(
                "QpProblem::new",
                format!("q of length {n}"),
                format!("{}", q.len()),
            ));
        }
        Ok(QpProblem {
            p,
            q,
            a_eq,
            b_eq,
            a_in,
            b_in,
            obj_const: 0.0,
        })
    }

    pub fn with_constant(mut self, c: f64) -> Self {
        self.obj_const = c;
        self
    }

    pub fn num_vars(&self) -> usize {
        self.p.nrows()
    }

    pub fn num_eq(&self) -> usize {
        self.a_eq.nrows()
    }

    pub fn num_in(&self) -> usize {
        self.a_in.nrows()
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * (x.dot(&(&self.p * x))) + self.q.dot(x) + self.obj_const
    }
}

/// Tunable knobs; the defaults are sensible for desk-scale problems.
#[derive(Clone, Debug)]
pub struct SolverSettings {
    pub eps_abs: f64,
    pub eps_rel: f64,
    pub max_iters: usize,
    /// Proximal regularization on the KKT solve.
    pub sigma: f64,
    /// Over-relaxation in (0, 2).
    pub alpha: f64,
    /// Initial penalty; equality rows get 1e3 times this.
    pub rho0: f64,
    /// Threshold for the primal infeasibility certificate.
    pub eps_pinf: f64,
    /// Residuals are checked every this many iterations.
    pub check_every: usize,
    pub polish: bool,
    pub scaling_iters: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings {
            eps_abs: 1e-6,
            eps_rel: 1e-6,
            max_iters: 20_000,
            sigma: 1e-6,
            alpha: 1.6,
            rho0: 0.1,
            eps_pinf: 1e-5,
            check_every: 25,
            polish: true,
            scaling_iters: 10,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SolveStatus {
    Optimal,
    MaxIters,
    Infeasible,
}

impl std::fmt::Display for SolveStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SolveStatus::Optimal => "optimal",
            SolveStatus::MaxIters => "max_iters",
            SolveStatus::Infeasible => "infeasible",
        })
    }
}

/// Unscaled KKT residuals at a primal/dual point.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct Residuals {
    /// Worst constraint violation (equality mismatch or positive inequality
    /// slack deficit).
    pub primal: f64,
    /// Stationarity violation, including any negative inequality multiplier.
    pub dual: f64,
    /// Complementarity: `|y'(Ax - b)|` summed over all rows.
    pub gap: f64,
}

#[derive(Clone, Debug)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub y_eq: DVector<f64>,
    pub y_in: DVector<f64>,
    pub status: SolveStatus,
    pub objective: f64,
    pub residuals: Residuals,
    pub iterations: usize,
}

/// KKT residuals of `(x, y_eq, y_in)` against the problem data, computed in
/// the original (unscaled) problem space.
pub fn kkt_residuals(
    prob: &QpProblem,
    x: &DVector<f64>,
    y_eq: &DVector<f64>,
    y_in: &DVector<f64>,
) -> Residuals {
    let r_eq = &prob.a_eq * x - &prob.b_eq;
    let s_in = &prob.a_in * x - &prob.b_in;
    let mut primal = inf_norm(&r_eq);
    for &s in s_in.iter() {
        primal = primal.max(s.max(0.0));
    }
    let mut stat = &prob.p * x + &prob.q;
    if prob.num_eq() > 0 {
        stat += prob.a_eq.tr_mul(y_eq);
    }
    if prob.num_in() > 0 {
        stat += prob.a_in.tr_mul(y_in);
    }
    let mut dual = inf_norm(&stat);
    for &y in y_in.iter() {
        dual = dual.max((-y).max(0.0));
    }
    let gap = (y_eq.dot(&r_eq) + y_in.dot(&s_in)).abs();
    Residuals { primal, dual, gap }
}

/// Solves the QP. Never panics on solvable shapes; the status reports how
/// the run ended and the residuals say how good the returned point is.
pub fn solve(prob: &QpProblem, settings: &SolverSettings) -> QpSolution {
    let n = prob.num_vars();
    let me = prob.num_eq();
    let mi = prob.num_in();
    let m = me + mi;

    // Stack [A_eq; A_in] with box bounds: equality rows have l = u.
    let mut a = DMatrix::<f64>::zeros(m, n);
    if me > 0 {
        a.view_mut((0, 0), (me, n)).copy_from(&prob.a_eq);
    }
    if mi > 0 {
        a.view_mut((me, 0), (mi, n)).copy_from(&prob.a_in);
    }
    let mut l = DVector::<f64>::from_element(m, f64::NEG_INFINITY);
    let mut u = DVector::<f64>::zeros(m);
    for i in 0..me {
        l[i] = prob.b_eq[i];
        u[i] = prob.b_eq[i];
    }
    for i in 0..mi {
        u[me + i] = prob.b_in[i];
    }

    let scaling = ruiz_equilibrate(&prob.p, &prob.q, &a, settings.scaling_iters);
    let Scaling {
        pb,
        qb,
        ab,
        d,
        e,
        cost: c_scale,
    } = scaling;
    let lb = scale_bound(&l, &e);
    let ub = scale_bound(&u, &e);

    let mut rho_bar = settings.rho0;
    let make_rho = |rho_bar: f64| -> DVector<f64> {
        DVector::from_fn(m, |i, _| {
            let r = if i < me { rho_bar * 1e3 } else { rho_bar };
            r.clamp(1e-6, 1e6)
        })
    };
    let mut rho = make_rho(rho_bar);
    let mut kkt = KktSolver::factor(&pb, &ab, &rho, settings.sigma);

    let mut x = DVector::<f64>::zeros(n);
    let mut z = DVector::from_fn(m, |i, _| 0.0f64.clamp(lb[i], ub[i]));
    let mut y = DVector::<f64>::zeros(m);
    let mut dy_scaled = DVector::<f64>::zeros(m);

    let mut refactor_count = 0usize;
    let mut best: Option<(DVector<f64>, DVector<f64>, Residuals, usize)> = None;

    let mut iter = 0usize;
    while iter < settings.max_iters {
        iter += 1;

        // KKT step: (P + sigma I + A' diag(rho) A) xt = sigma x - q + A'(rho z - y)
        let mut rhs = settings.sigma * &x - &qb;
        if m > 0 {
            rhs += ab.tr_mul(&(rho.component_mul(&z) - &y));
        }
        let xt = kkt.solve(&rhs);
        let zt = if m > 0 { &ab * &xt } else { DVector::zeros(0) };

        let x_next = settings.alpha * &xt + (1.0 - settings.alpha) * &x;
        if m > 0 {
            let z_pre = settings.alpha * &zt + (1.0 - settings.alpha) * &z;
            let z_next = DVector::from_fn(m, |i, _| (z_pre[i] + y[i] / rho[i]).clamp(lb[i], ub[i]));
            let y_next = &y + rho.component_mul(&(&z_pre - &z_next));
            dy_scaled = &y_next - &y;
            z = z_next;
            y = y_next;
        }
        x = x_next;

        let at_checkpoint = iter % settings.check_every == 0 || iter == settings.max_iters;
        if !at_checkpoint {
            continue;
        }

        // Unscale and measure against the original data.
        let xu = d.component_mul(&x);
        let yu = e.component_mul(&y) / c_scale;
        let (y_eq, y_in) = split_dual(&yu, me);
        let res = kkt_residuals(prob, &xu, &y_eq, &y_in);

        let ax = &a * &xu;
        let eps_prim = settings.eps_abs
            + settings.eps_rel * inf_norm(&ax).max(inf_norm(&bounds_mag(&l, &u)));
        let px = &prob.p * &xu;
        let aty = a.tr_mul(&yu);
        let eps_dual = settings.eps_abs
            + settings.eps_rel * inf_norm(&px).max(inf_norm(&aty)).max(inf_norm(&prob.q));
        let obj = prob.objective(&xu);
        let eps_gap = settings.eps_abs + settings.eps_rel * obj.abs();

        best = Some((xu.clone(), yu.clone(), res, iter));

        if res.primal <= eps_prim && res.dual <= eps_dual {
            if settings.polish {
                if let Some(polished) = polish(prob, &xu, &y_eq, &y_in) {
                    let pres = kkt_residuals(prob, &polished.0, &polished.1, &polished.2);
                    let pobj = prob.objective(&polished.0);
                    let peps_gap = settings.eps_abs + settings.eps_rel * pobj.abs();
                    if pres.primal <= eps_prim && pres.dual <= eps_dual && pres.gap <= peps_gap {
                        return QpSolution {
                            x: polished.0,
                            y_eq: polished.1,
                            y_in: polished.2,
                            status: SolveStatus::Optimal,
                            objective: pobj,
                            residuals: pres,
                            iterations: iter,
                        };
                    }
                }
            }
            if res.gap <= eps_gap {
                return QpSolution {
                    x: xu,
                    y_eq,
                    y_in,
                    status: SolveStatus::Optimal,
                    objective: obj,
                    residuals: res,
                    iterations: iter,
                };
            }
            // Complementarity still slack: keep iterating.
        }

        // Primal infeasibility certificate from the dual increment.
        if m > 0 {
            let dyu = e.component_mul(&dy_scaled) / c_scale;
            if certifies_infeasible(prob, &a, &dyu, settings.eps_pinf) {
                let (y_eq, y_in) = split_dual(&dyu, me);
                return QpSolution {
                    x: xu,
                    y_eq,
                    y_in,
                    status: SolveStatus::Infeasible,
                    objective: obj,
                    residuals: res,
                    iterations: iter,
                };
            }
        }

        // Penalty adaptation, with a bounded number of refactorizations.
        if m > 0 && refactor_count < 20 {
            let zu = unscale_z(&z, &e);
            let prim_rel = res.primal / inf_norm(&ax).max(inf_norm(&zu)).max(1e-10);
            let dual_rel = res.dual
                / inf_norm(&px)
                    .max(inf_norm(&aty))
                    .max(inf_norm(&prob.q))
                    .max(1e-10);
            if dual_rel > 0.0 && prim_rel > 0.0 {
                let ratio = (prim_rel / dual_rel).sqrt();
                if !(0.2..=5.0).contains(&ratio) {
                    rho_bar = (rho_bar * ratio).clamp(1e-6, 1e6);
                    rho = make_rho(rho_bar);
                    kkt = KktSolver::factor(&pb, &ab, &rho, settings.sigma);
                    refactor_count += 1;
                }
            }
        }
    }

    // Out of iterations: report the best checked iterate, polished if that
    // happens to rescue it.
    let (xu, yu, res, _) = best.unwrap_or_else(|| {
        let xu = d.component_mul(&x);
        let yu = e.component_mul(&y) / c_scale;
        let (y_eq, y_in) = split_dual(&yu, me);
        let r = kkt_residuals(prob, &xu, &y_eq, &y_in);
        (xu, yu, r, iter)
    });
    let (y_eq, y_in) = split_dual(&yu, me);
    if settings.polish {
        if let Some(polished) = polish(prob, &xu, &y_eq, &y_in) {
            let pres = kkt_residuals(prob, &polished.0, &polished.1, &polished.2);
            if pres.primal.max(pres.dual) < res.primal.max(res.dual) {
                let pobj = prob.objective(&polished.0);
                let eps_prim = settings.eps_abs + settings.eps_rel;
                let ok = pres.primal <= eps_prim && pres.dual <= eps_prim;
                return QpSolution {
                    x: polished.0,
                    y_eq: polished.1,
                    y_in: polished.2,
                    status: if ok { SolveStatus::Optimal } else { SolveStatus::MaxIters },
                    objective: pobj,
                    residuals: pres,
                    iterations: iter,
                };
            }
        }
    }
    let obj = prob.objective(&xu);
    QpSolution {
        x: xu,
        y_eq,
        y_in,
        status: SolveStatus::MaxIters,
        objective: obj,
        residuals: res,
        iterations: iter,
    }
}

struct Scaling {
    pb: DMatrix<f64>,
    qb: DVector<f64>,
    ab: DMatrix<f64>,
    d: DVector<f64>,
    e: DVector<f64>,
    cost: f64,
}

/// Modified Ruiz equilibration on the KKT block matrix, with OSQP-style cost
/// normalization folded in.
fn ruiz_equilibrate(p: &DMatrix<f64>, q: &DVector<f64>, a: &DMatrix<f64>, iters: usize) -> Scaling {
    let n = p.nrows();
    let m = a.nrows();
    let mut pb = p.clone();
    let mut qb = q.clone();
    let mut ab = a.clone();
    let mut d = DVector::from_element(n, 1.0);
    let mut e = DVector::from_element(m, 1.0);
    let mut cost = 1.0;

    let guard = |norm: f64| -> f64 {
        if norm < 1e-8 {
            1.0
        } else {
            (1.0 / norm.sqrt()).clamp(1e-4, 1e4)
        }
    };

    for _ in 0..iters {
        let mut dd = DVector::from_element(n, 1.0);
        for j in 0..n {
            let mut norm: f64 = 0.0;
            for i in 0..n {
                norm = norm.max(pb[(i, j)].abs());
            }
            for i in 0..m {
                norm = norm.max(ab[(i, j)].abs());
            }
            dd[j] = guard(norm);
        }
        let mut de = DVector::from_element(m, 1.0);
        for i in 0..m {
            let mut norm: f64 = 0.0;
            for j in 0..n {
                norm = norm.max(ab[(i, j)].abs());
            }
            de[i] = guard(norm);
        }
        for i in 0..n {
            for j in 0..n {
                pb[(i, j)] *= dd[i] * dd[j];
            }
        }
        for i in 0..m {
            for j in 0..n {
                ab[(i, j)] *= de[i] * dd[j];
            }
        }
        for j in 0..n {
            qb[j] *= dd[j];
        }
        d.component_mul_assign(&dd);
        e.component_mul_assign(&de);

        // Cost normalization.
        let mut mean_col = 0.0;
        for j in 0..n {
            let mut norm: f64 = 0.0;
            for i in 0..n {
                norm = norm.max(pb[(i, j)].abs());
            }
            mean_col += norm;
        }
        mean_col /= n as f64;
        let denom = mean_col.max(inf_norm(&qb));
        if denom > 1e-8 {
            let gamma = (1.0 / denom).clamp(1e-6, 1e6);
            pb *= gamma;
            qb *= gamma;
            cost *= gamma;
        }
    }
    Scaling {
        pb,
        qb,
        ab,
        d,
        e,
        cost,
    }
}

fn scale_bound(b: &DVector<f64>, e: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(b.len(), |i, _| {
        if b[i].is_finite() {
            b[i] * e[i]
        } else {
            b[i]
        }
    })
}

fn unscale_z(z: &DVector<f64>, e: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(z.len(), |i, _| z[i] / e[i])
}

/// Finite magnitudes of the row bounds, for the relative tolerance scale.
fn bounds_mag(l: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(l.len(), |i, _| {
        let lv = if l[i].is_finite() { l[i].abs() } else { 0.0 };
        let uv = if u[i].is_finite() { u[i].abs() } else { 0.0 };
        lv.max(uv)
    })
}

fn split_dual(y: &DVector<f64>, me: usize) -> (DVector<f64>, DVector<f64>) {
    let y_eq = DVector::from_fn(me, |i, _| y[i]);
    let y_in = DVector::from_fn(y.len() - me, |i, _| y[me + i]);
    (y_eq, y_in)
}

/// `dy` certifies primal infeasibility when `A' dy ~ 0`, the inequality part
/// is (numerically) nonnegative, and the bounds' support function at `dy` is
/// strictly negative.
fn certifies_infeasible(prob: &QpProblem, a: &DMatrix<f64>, dy: &DVector<f64>, eps: f64) -> bool {
    let norm = inf_norm(dy);
    if norm <= 1e-14 {
        return false;
    }
    let dyn_ = dy / norm;
    let me = prob.num_eq();
    for i in me..dy.len() {
        if dyn_[i] < -1e-9 {
            return false;
        }
    }
    if inf_norm(&a.tr_mul(&dyn_)) > eps {
        return false;
    }
    let mut support = 0.0;
    for i in 0..me {
        support += prob.b_eq[i] * dyn_[i];
    }
    for i in 0..prob.num_in() {
        support += prob.b_in[i] * dyn_[i + me].max(0.0);
    }
    support <= -eps
}

/// Re-solves on the active set identified by the duals; returns the refined
/// point or `None` when the linear algebra fails.
fn polish(
    prob: &QpProblem,
    x: &DVector<f64>,
    _y_eq: &DVector<f64>,
    y_in: &DVector<f64>,
) -> Option<(DVector<f64>, DVector<f64>, DVector<f64>)> {
    let n = prob.num_vars();
    let me = prob.num_eq();
    let slack = &prob.a_in * x - &prob.b_in;
    let active: Vec<usize> = (0..prob.num_in())
        .filter(|&i| y_in[i] > 0.0 || slack[i] > -1e-10)
        .collect();
    let na = active.len();
    let dim = n + me + na;
    let delta = 1e-9;

    let mut kkt = DMatrix::<f64>::zeros(dim, dim);
    kkt.view_mut((0, 0), (n, n)).copy_from(&prob.p);
    for i in 0..n {
        kkt[(i, i)] += delta;
    }
    for r in 0..me {
        for c in 0..n {
            let v = prob.a_eq[(r, c)];
            kkt[(n + r, c)] = v;
            kkt[(c, n + r)] = v;
        }
    }
    for (k, &r) in active.iter().enumerate() {
        for c in 0..n {
            let v = prob.a_in[(r, c)];
            kkt[(n + me + k, c)] = v;
            kkt[(c, n + me + k)] = v;
        }
    }
    for r in 0..(me + na) {
        kkt[(n + r, n + r)] = -delta;
    }

    let mut rhs = DVector::<f64>::zeros(dim);
    for i in 0..n {
        rhs[i] = -prob.q[i];
    }
    for r in 0..me {
        rhs[n + r] = prob.b_eq[r];
    }
    for (k, &r) in active.iter().enumerate() {
        rhs[n + me + k] = prob.b_in[r];
    }

    let lu = kkt.clone().lu();
    let mut sol = lu.solve(&rhs)?;

    // Iterative refinement against the unregularized KKT system.
    for _ in 0..3 {
        let mut resid = rhs.clone();
        // resid -= K0 * sol, with K0 the same matrix without the deltas.
        let mut k0_sol = &kkt * &sol;
        for i in 0..n {
            k0_sol[i] -= delta * sol[i];
        }
        for r in 0..(me + na) {
            k0_sol[n + r] += delta * sol[n + r];
        }
        resid -= k0_sol;
        if inf_norm(&resid) < 1e-14 {
            break;
        }
        if let Some(corr) = lu.solve(&resid) {
            sol += corr;
        } else {
            break;
        }
    }

    let xp = DVector::from_fn(n, |i, _| sol[i]);
    let yp_eq = DVector::from_fn(me, |i, _| sol[n + i]);
    let mut yp_in = DVector::<f64>::zeros(prob.num_in());
    for (k, &r) in active.iter().enumerate() {
        // A genuinely inactive row sneaking in shows up as a negative
        // multiplier; clip the tiny ones, give up on real sign errors.
        let v = sol[n + me + k];
        if v < -1e-7 {
            return None;
        }
        yp_in[r] = v.max(0.0);
    }
    if xp.iter().any(|v| !v.is_finite()) {
        return None;
    }
    Some((xp, yp_eq, yp_in))
}

/// Cholesky (LU fallback) of the reduced KKT matrix `P + sigma I + A'RA`.
struct KktSolver {
    chol: Option<nalgebra::Cholesky<f64, nalgebra::Dyn>>,
    lu: Option<nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>>,
}

impl KktSolver {
    fn factor(pb: &DMatrix<f64>, ab: &DMatrix<f64>, rho: &DVector<f64>, sigma: f64) -> Self {
        let n = pb.nrows();
        let mut k = pb.clone();
        for i in 0..n {
            k[(i, i)] += sigma;
        }
        if ab.nrows() > 0 {
            let mut ra = ab.clone();
            for i in 0..ab.nrows() {
                for j in 0..n {
                    ra[(i, j)] *= rho[i];
                }
            }
            k += ab.tr_mul(&ra);
        }
        match k.clone().cholesky() {
            Some(c) => KktSolver {
                chol: Some(c),
                lu: None,
            },
            None => KktSolver {
                chol: None,
                lu: Some(k.lu()),
            },
        }
    }

    fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        if let Some(c) = &self.chol {
            return c.solve(rhs);
        }
        self.lu
            .as_ref()
            .and_then(|lu| lu.solve(rhs))
            .unwrap_or_else(|| DVector::zeros(rhs.len()))
    }
}

fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |acc, &x| acc.max(x.abs()))
}

fn inf_norm_mat(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |acc, &x| acc.max(x.abs()))
}
