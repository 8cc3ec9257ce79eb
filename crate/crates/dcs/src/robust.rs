//! Assembly of the robust synthesis problem as a convex QP.
//!
//! With disturbance feedback `u = Q (P w) + v` the stacked constraints read
//!
//! ```text
//!   F v + (F Q P + G) w <= c    for every stacked w in W x ... x W,
//! ```
//!
//! affine in `(Q, v)`. Robustness over the compact polytope
//! `W = {w : Aw w <= bw}` is enforced exactly by dualizing the row-wise
//! maximization stage by stage: for constraint row `i` and stage `t` a
//! multiplier vector `lambda_{i,t} >= 0` with
//!
//! ```text
//!   Aw' lambda_{i,t} = ((F Q P + G) row i, stage-t block)'
//!   F v + sum_t bw' lambda_{i,t} <= c    (row i)
//! ```
//!
//! certifies the worst case. The objective is the quadratic nominal cost of
//! the disturbance-free trajectory `xhat = boldA x0 + boldB v`, which does
//! not involve `Q` at all. Free `Q` entries are restricted to the support of
//! the information structure's stacked pattern — exact under quadratic
//! invariance, a conservative restriction otherwise (the assembled problem
//! records which).

use nalgebra::{DMatrix, DVector};
use serde_json::json;

use crate::binmat::BinaryMatrix;
use crate::error::{Error, Result};
use crate::infostruct::InformationStructure;
use crate::lifted::{build_constraint_data, ConstraintSpec, LiftedSystem};
use crate::policy::DisturbanceFeedbackPolicy;
use crate::qpsolve::{QpProblem, QpSolution, SolveStatus};

/// Quadratic stage weights for the nominal cost
/// `sum_k xhat_k' Qx_k xhat_k + sum_k u_k' Ru_k u_k`.
#[derive(Clone, Debug)]
pub struct CostSpec {
    qx: Vec<DMatrix<f64>>,
    ru: Vec<DMatrix<f64>>,
}

impl CostSpec {
    /// `qx` holds `N + 1` symmetric PSD `n x n` weights (stages `0..N`),
    /// `ru` holds `N` symmetric PSD `m x m` weights.
    pub fn new(qx: Vec<DMatrix<f64>>, ru: Vec<DMatrix<f64>>) -> Result<Self> {
        if qx.len() != ru.len() + 1 {
            return Err(Error::dims(
                "CostSpec::new",
                format!("{} state weights for {} input weights", ru.len() + 1, ru.len()),
                format!("{}", qx.len()),
            ));
        }
        validate_psd("Qx", &qx)?;
        validate_psd("Ru", &ru)?;
        Ok(CostSpec { qx, ru })
    }

    /// The same weight at every stage.
    pub fn uniform(qx: DMatrix<f64>, ru: DMatrix<f64>, n_steps: usize) -> Result<Self> {
        CostSpec::new(vec![qx; n_steps + 1], vec![ru; n_steps])
    }

    pub fn horizon(&self) -> usize {
        self.ru.len()
    }

    pub fn state_weights(&self) -> &[DMatrix<f64>] {
        &self.qx
    }

    pub fn input_weights(&self) -> &[DMatrix<f64>] {
        &self.ru
    }
}

fn validate_psd(name: &'static str, weights: &[DMatrix<f64>]) -> Result<()> {
    for (index, w) in weights.iter().enumerate() {
        if w.nrows() != w.ncols() {
            return Err(Error::dims(
                "CostSpec::new",
                "square weights".to_string(),
                format!("{}x{} at {name}[{index}]", w.nrows(), w.ncols()),
            ));
        }
        let scale = w.amax().max(1.0);
        if (w - w.transpose()).amax() > 1e-10 * scale {
            return Err(Error::NotPsd {
                name,
                index,
                eigmin: f64::NAN,
            });
        }
        let eigmin = w
            .clone()
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        if eigmin < -1e-10 * scale {
            return Err(Error::NotPsd { name, index, eigmin });
        }
    }
    Ok(())
}

/// Where each decision variable lives in the flat QP vector:
/// `[q entries on the pattern support | v stages 0..N | lambda]`, with
/// `lambda_{i,t}` for constraint row `i` and disturbance stage `t` occupying
/// one contiguous run of `q_w` facet multipliers.
#[derive(Clone, Debug)]
pub struct VariableLayout {
    /// Scalar coordinates of the free `Q` entries inside the stacked gain.
    q_support: Vec<(usize, usize)>,
    n_steps: usize,
    m: usize,
    p: usize,
    /// Stacked constraint rows (`N` stages plus the terminal block).
    n_rows: usize,
    /// Facets of the disturbance polytope.
    q_w: usize,
}

impl VariableLayout {
    pub fn num_q(&self) -> usize {
        self.q_support.len()
    }

    pub fn num_v(&self) -> usize {
        self.m * self.n_steps
    }

    pub fn num_lambda(&self) -> usize {
        self.n_rows * self.n_steps * self.q_w
    }

    pub fn num_vars(&self) -> usize {
        self.num_q() + self.num_v() + self.num_lambda()
    }

    pub fn q_support(&self) -> &[(usize, usize)] {
        &self.q_support
    }

    fn v_var(&self, i: usize) -> usize {
        self.num_q() + i
    }

    fn lambda_var(&self, row: usize, stage: usize, facet: usize) -> usize {
        self.num_q() + self.num_v() + (row * self.n_steps + stage) * self.q_w + facet
    }

    /// Human-readable variable names in layout order, for the QP export.
    pub fn names(&self) -> Vec<String> {
        let mut names: Vec<String> =
            self.q_support.iter().map(|&(a, b)| format!("Q[{a},{b}]")).collect();
        names.extend((0..self.num_v()).map(|i| format!("v[{i}]")));
        for row in 0..self.n_rows {
            for stage in 0..self.n_steps {
                for facet in 0..self.q_w {
                    names.push(format!("lambda[{row},{stage},{facet}]"));
                }
            }
        }
        names
    }
}

/// Knobs for [`assemble`].
#[derive(Clone, Copy, Debug)]
pub struct AssembleOptions {
    /// Optional tiny diagonal penalty on the `Q` entries; the cost is
    /// independent of `Q`, so the optimal gain is otherwise non-unique.
    pub tikhonov_q: f64,
    /// Zero threshold when reading the sparsity of the lifted response.
    pub struct_tol: f64,
}

impl Default for AssembleOptions {
    fn default() -> Self {
        AssembleOptions {
            tikhonov_q: 0.0,
            struct_tol: 1e-9,
        }
    }
}

/// The assembled QP together with everything needed to interpret its
/// solution.
#[derive(Clone, Debug)]
pub struct AssembledProblem {
    pub qp: QpProblem,
    pub layout: VariableLayout,
    /// The stacked pattern the `Q` entries were restricted to.
    pub big_s: BinaryMatrix,
    /// True when the structure is not quadratically invariant for this
    /// plant, in which case restricting `Q` to the pattern is a conservative
    /// inner approximation rather than an exact reparametrization.
    pub conservative_restriction: bool,
}

/// Builds the dualized QP for the given plant, structure, constraints, cost,
/// and initial state.
pub fn assemble(
    lifted: &LiftedSystem,
    info: &InformationStructure,
    spec: &ConstraintSpec,
    cost: &CostSpec,
    x0: &DVector<f64>,
    opts: AssembleOptions,
) -> Result<AssembledProblem> {
    let (n_steps, n, m, p) = (
        lifted.horizon(),
        lifted.num_states(),
        lifted.num_inputs(),
        lifted.num_outputs(),
    );
    if info.horizon() != n_steps || info.num_inputs() != m || info.num_outputs() != p {
        return Err(Error::dims(
            "assemble",
            format!("structure over horizon {n_steps} with {m}x{p} blocks"),
            format!(
                "horizon {} with {}x{}",
                info.horizon(),
                info.num_inputs(),
                info.num_outputs()
            ),
        ));
    }
    if cost.horizon() != n_steps {
        return Err(Error::dims(
            "assemble",
            format!("cost over horizon {n_steps}"),
            format!("{}", cost.horizon()),
        ));
    }
    for (index, w) in cost.state_weights().iter().enumerate() {
        if w.nrows() != n {
            return Err(Error::dims(
                "assemble",
                format!("{n}x{n} state weights"),
                format!("{}x{} at Qx[{index}]", w.nrows(), w.ncols()),
            ));
        }
    }
    for (index, w) in cost.input_weights().iter().enumerate() {
        if w.nrows() != m {
            return Err(Error::dims(
                "assemble",
                format!("{m}x{m} input weights"),
                format!("{}x{} at Ru[{index}]", w.nrows(), w.ncols()),
            ));
        }
    }

    let data = build_constraint_data(spec, lifted, x0)?;
    let big_s = info.big_s();

    // Restricting Q to the pattern is exact iff the structure is QI, which
    // the stacked boolean test reads directly off the lifted response.
    let dstack = BinaryMatrix::struct_of(&lifted.cb, opts.struct_tol);
    let qi_holds = big_s
        .bool_mul(&dstack)?
        .bool_mul(&big_s)?
        .leq(&big_s)?
        .holds;

    let layout = VariableLayout {
        q_support: big_s.support(),
        n_steps,
        m,
        p,
        n_rows: data.f.nrows(),
        q_w: spec.num_facets(),
    };
    let nv = layout.num_vars();
    let (nq, n_rows, q_w) = (layout.num_q(), layout.n_rows, layout.q_w);

    // Objective: J = (boldA x0 + Btilde v)' Qbar (boldA x0 + Btilde v)
    //              + v' Rbar v, over the first m N input entries.
    let b_tilde = lifted.big_b.columns(0, m * n_steps).clone_owned();
    let mut q_bar = DMatrix::<f64>::zeros(n * (n_steps + 1), n * (n_steps + 1));
    for (k, w) in cost.state_weights().iter().enumerate() {
        q_bar.view_mut((k * n, k * n), (n, n)).copy_from(w);
    }
    let mut r_bar = DMatrix::<f64>::zeros(m * n_steps, m * n_steps);
    for (k, w) in cost.input_weights().iter().enumerate() {
        r_bar.view_mut((k * m, k * m), (m, m)).copy_from(w);
    }
    let x_free = &lifted.big_a * x0;
    let qb = &q_bar * &b_tilde;
    let p_vv = 2.0 * (b_tilde.tr_mul(&qb) + &r_bar);
    let q_lin_v = 2.0 * qb.tr_mul(&x_free);
    let obj_const = (x_free.transpose() * &q_bar * &x_free)[(0, 0)];

    let mut p_mat = DMatrix::<f64>::zeros(nv, nv);
    p_mat
        .view_mut((nq, nq), (layout.num_v(), layout.num_v()))
        .copy_from(&p_vv);
    if opts.tikhonov_q > 0.0 {
        for i in 0..nq {
            p_mat[(i, i)] = 2.0 * opts.tikhonov_q;
        }
    }
    let mut q_lin = DVector::<f64>::zeros(nv);
    q_lin.rows_mut(nq, layout.num_v()).copy_from(&q_lin_v);

    // Equalities: Aw' lambda_{i,t} - (F Q P) row block = G row block, one
    // scalar row per constraint row, stage, and disturbance coordinate. The
    // terminal stage of w is identically zero and is never dualized.
    let num_eq = n_rows * n_steps * n;
    let mut a_eq = DMatrix::<f64>::zeros(num_eq, nv);
    let mut b_eq = DVector::<f64>::zeros(num_eq);
    // Cache F (row i) times the P rows hit by each support entry.
    let p_resp = &lifted.p_mat;
    for i in 0..n_rows {
        for t in 0..n_steps {
            for d in 0..n {
                let row = (i * n_steps + t) * n + d;
                let col = t * n + d;
                for f in 0..q_w {
                    a_eq[(row, layout.lambda_var(i, t, f))] = spec.aw[(f, d)];
                }
                for (idx, &(a, b)) in layout.q_support.iter().enumerate() {
                    let coef = data.f[(i, a)] * p_resp[(b, col)];
                    if coef != 0.0 {
                        a_eq[(row, idx)] = -coef;
                    }
                }
                b_eq[row] = data.g[(i, col)];
            }
        }
    }

    // Inequalities: F v + sum_t bw' lambda_{i,t} <= c, then lambda >= 0.
    let num_in = n_rows + layout.num_lambda();
    let mut a_in = DMatrix::<f64>::zeros(num_in, nv);
    let mut b_in = DVector::<f64>::zeros(num_in);
    for i in 0..n_rows {
        for j in 0..layout.num_v() {
            a_in[(i, layout.v_var(j))] = data.f[(i, j)];
        }
        for t in 0..n_steps {
            for f in 0..q_w {
                a_in[(i, layout.lambda_var(i, t, f))] = spec.bw[f];
            }
        }
        b_in[i] = data.c[i];
    }
    for l in 0..layout.num_lambda() {
        a_in[(n_rows + l, nq + layout.num_v() + l)] = -1.0;
    }

    let qp = QpProblem::new(p_mat, q_lin, a_eq, b_eq, a_in, b_in)?.with_constant(obj_const);
    Ok(AssembledProblem {
        qp,
        layout,
        big_s,
        conservative_restriction: !qi_holds,
    })
}

/// Scatters a converged solver point back into a disturbance-feedback
/// policy; the gain support is exactly the pattern the problem was built on.
pub fn extract(
    solution: &QpSolution,
    problem: &AssembledProblem,
) -> Result<(DisturbanceFeedbackPolicy, f64)> {
    if solution.status != SolveStatus::Optimal {
        return Err(Error::NotConverged {
            status: solution.status.to_string(),
            detail: format!(
                "primal {:.3e}, dual {:.3e} after {} iterations",
                solution.residuals.primal, solution.residuals.dual, solution.iterations
            ),
        });
    }
    let layout = &problem.layout;
    let (n_steps, m, p) = (layout.n_steps, layout.m, layout.p);
    let mut q = DMatrix::<f64>::zeros(m * (n_steps + 1), p * (n_steps + 1));
    for (idx, &(a, b)) in layout.q_support.iter().enumerate() {
        q[(a, b)] = solution.x[idx];
    }
    let mut v = DVector::<f64>::zeros(m * (n_steps + 1));
    for i in 0..layout.num_v() {
        v[i] = solution.x[layout.v_var(i)];
    }
    let policy = DisturbanceFeedbackPolicy::new(q, v, n_steps, m, p)?;
    Ok((policy, solution.objective))
}

/// Serializes the assembled QP as sparse triplets with variable names, for
/// cross-checking against external solvers.
pub fn export_sparse_json(problem: &AssembledProblem) -> serde_json::Value {
    let triplets = |mat: &DMatrix<f64>| -> Vec<serde_json::Value> {
        let mut out = Vec::new();
        for i in 0..mat.nrows() {
            for j in 0..mat.ncols() {
                if mat[(i, j)] != 0.0 {
                    out.push(json!([i, j, mat[(i, j)]]));
                }
            }
        }
        out
    };
    let qp = &problem.qp;
    json!({
        "num_vars": qp.num_vars(),
        "variables": problem.layout.names(),
        "objective": {
            "quadratic": triplets(&qp.p),
            "linear": qp.q.iter().copied().collect::<Vec<f64>>(),
            "constant": qp.obj_const,
        },
        "equalities": {
            "matrix": triplets(&qp.a_eq),
            "rhs": qp.b_eq.iter().copied().collect::<Vec<f64>>(),
        },
        "inequalities": {
            "matrix": triplets(&qp.a_in),
            "rhs": qp.b_in.iter().copied().collect::<Vec<f64>>(),
        },
        "conservative_restriction": problem.conservative_restriction,
    })
}
