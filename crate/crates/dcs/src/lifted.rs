//! Finite-horizon lifting of a discrete-time plant.
//!
//! For `x_{k+1} = A x_k + B u_k + D w_k`, `y_k = C x_k + H w_k` over `N`
//! steps, stacking `x = (x_0..x_N)`, `u = (u_0..u_N)`, `w = (w_0..w_N)`
//! (inputs and disturbances carry a zero final block) gives
//!
//! ```text
//!   x = bA x0 + bB u + bE_D w
//!   y = bC bA x0 + CB u + P w,     CB = bC bB,  P = bC bE_D + bH
//! ```
//!
//! `CB` is strictly block lower triangular — the one-step delay through the
//! plant — which is what makes the later controller reparameterization work
//! by finite substitution. Polytopic stage constraints stack the same way
//! into `F u + G w <= c`.

use nalgebra::{DMatrix, DVector};

use crate::binmat::BinaryMatrix;
use crate::error::{Error, Result};
use crate::polytope::Polytope;

/// State-space data `(A, B, C, D, H)` with `n` states, `m` inputs, `p`
/// outputs. `D` and `H` shape how the disturbance enters the dynamics and
/// the measurement.
#[derive(Clone, Debug)]
pub struct Plant {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub h: DMatrix<f64>,
}

impl Plant {
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DMatrix<f64>,
        d: DMatrix<f64>,
        h: DMatrix<f64>,
    ) -> Result<Self> {
        let n = a.nrows();
        if n == 0 || a.ncols() != n {
            return Err(Error::dims("Plant::new", "square nonempty A", format!("{}x{}", a.nrows(), a.ncols())));
        }
        if b.nrows() != n || b.ncols() == 0 {
            return Err(Error::dims("Plant::new", format!("B with {n} rows"), format!("{}x{}", b.nrows(), b.ncols())));
        }
        if c.ncols() != n || c.nrows() == 0 {
            return Err(Error::dims("Plant::new", format!("C with {n} cols"), format!("{}x{}", c.nrows(), c.ncols())));
        }
        if d.shape() != (n, n) {
            return Err(Error::dims("Plant::new", format!("{n}x{n} D"), format!("{}x{}", d.nrows(), d.ncols())));
        }
        if h.shape() != (c.nrows(), n) {
            return Err(Error::dims("Plant::new", format!("{}x{n} H", c.nrows()), format!("{}x{}", h.nrows(), h.ncols())));
        }
        Ok(Plant { a, b, c, d, h })
    }

    pub fn num_states(&self) -> usize {
        self.a.nrows()
    }

    pub fn num_inputs(&self) -> usize {
        self.b.ncols()
    }

    pub fn num_outputs(&self) -> usize {
        self.c.nrows()
    }
}

/// How to form the one-step-interaction patterns `Delta_g`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeltaMode {
    /// `Struct(C A^g B)` on the real product — exact for the given plant,
    /// sensitive to cancellation.
    Numeric,
    /// Boolean product `Struct(C) Struct(A)^g Struct(B)` — cancellation-free
    /// upper bound on the numeric pattern.
    Structural,
}

impl std::fmt::Display for DeltaMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DeltaMode::Numeric => "numeric",
            DeltaMode::Structural => "structural",
        })
    }
}

/// The pattern of `C A^g B`: which input channels can influence which
/// measurement channels after `g + 1` steps.
pub fn delta(plant: &Plant, g: usize, tol: f64, mode: DeltaMode) -> BinaryMatrix {
    match mode {
        DeltaMode::Numeric => {
            let mut ag = DMatrix::<f64>::identity(plant.num_states(), plant.num_states());
            for _ in 0..g {
                ag = &plant.a * ag;
            }
            BinaryMatrix::struct_of(&(&plant.c * ag * &plant.b), tol)
        }
        DeltaMode::Structural => {
            let sa = BinaryMatrix::struct_of(&plant.a, tol);
            let sb = BinaryMatrix::struct_of(&plant.b, tol);
            let sc = BinaryMatrix::struct_of(&plant.c, tol);
            let mut acc = sc;
            for _ in 0..g {
                acc = acc.bool_mul(&sa).expect("square A");
            }
            acc.bool_mul(&sb).expect("shapes fixed by plant")
        }
    }
}

/// Stacked horizon-`N` maps; all blocks are laid out with block index =
/// time index, sizes `n`, `m`, `p` per block as appropriate.
#[derive(Clone, Debug)]
pub struct LiftedSystem {
    pub big_a: DMatrix<f64>,
    pub big_e: DMatrix<f64>,
    pub big_b: DMatrix<f64>,
    pub big_ed: DMatrix<f64>,
    pub big_c: DMatrix<f64>,
    pub big_h: DMatrix<f64>,
    /// `bC bE_D + bH`: the disturbance-to-output map.
    pub p_mat: DMatrix<f64>,
    /// `bC bB`: the input-to-output map, strictly block lower triangular.
    pub cb: DMatrix<f64>,
    n_steps: usize,
    n: usize,
    m: usize,
    p: usize,
}

impl LiftedSystem {
    pub fn build(plant: &Plant, n_steps: usize) -> Self {
        assert!(n_steps >= 1, "horizon must be at least 1");
        let (n, m, p) = (plant.num_states(), plant.num_inputs(), plant.num_outputs());
        let blocks = n_steps + 1;

        let mut powers = Vec::with_capacity(blocks);
        powers.push(DMatrix::<f64>::identity(n, n));
        for i in 1..blocks {
            powers.push(&plant.a * &powers[i - 1]);
        }

        let mut big_a = DMatrix::<f64>::zeros(n * blocks, n);
        for i in 0..blocks {
            big_a.view_mut((i * n, 0), (n, n)).copy_from(&powers[i]);
        }

        let mut big_e = DMatrix::<f64>::zeros(n * blocks, n * blocks);
        for i in 0..blocks {
            for j in 0..i {
                big_e
                    .view_mut((i * n, j * n), (n, n))
                    .copy_from(&powers[i - j - 1]);
            }
        }

        let eye = DMatrix::<f64>::identity(blocks, blocks);
        let big_b = &big_e * eye.kronecker(&plant.b);
        let big_ed = &big_e * eye.kronecker(&plant.d);
        let big_c = eye.kronecker(&plant.c);
        let big_h = eye.kronecker(&plant.h);
        let p_mat = &big_c * &big_ed + &big_h;
        let cb = &big_c * &big_b;

        LiftedSystem {
            big_a,
            big_e,
            big_b,
            big_ed,
            big_c,
            big_h,
            p_mat,
            cb,
            n_steps,
            n,
            m,
            p,
        }
    }

    pub fn horizon(&self) -> usize {
        self.n_steps
    }

    pub fn num_states(&self) -> usize {
        self.n
    }

    pub fn num_inputs(&self) -> usize {
        self.m
    }

    pub fn num_outputs(&self) -> usize {
        self.p
    }

    /// Stacked state response `bA x0 + bB u + bE_D w`.
    pub fn states(&self, x0: &DVector<f64>, u: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        &self.big_a * x0 + &self.big_b * u + &self.big_ed * w
    }

    /// Stacked output response `bC bA x0 + CB u + P w`.
    pub fn outputs(&self, x0: &DVector<f64>, u: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        &self.big_c * (&self.big_a * x0) + &self.cb * u + &self.p_mat * w
    }
}

/// Per-stage polytopic constraints `U x_k + V u_k <= b` for `k < N`, a
/// terminal set `R x_N <= z`, and the disturbance set `W = {w : Aw w <= bw}`.
///
/// Construction validates shapes and requires `W` bounded and nonempty.
#[derive(Clone, Debug)]
pub struct ConstraintSpec {
    pub u: DMatrix<f64>,
    pub v: DMatrix<f64>,
    pub b: DVector<f64>,
    pub r: DMatrix<f64>,
    pub z: DVector<f64>,
    pub aw: DMatrix<f64>,
    pub bw: DVector<f64>,
    w_set: Polytope,
}

impl ConstraintSpec {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        u: DMatrix<f64>,
        v: DMatrix<f64>,
        b: DVector<f64>,
        r: DMatrix<f64>,
        z: DVector<f64>,
        aw: DMatrix<f64>,
        bw: DVector<f64>,
    ) -> Result<Self> {
        let n = u.ncols();
        if u.nrows() != v.nrows() || u.nrows() != b.len() {
            return Err(Error::dims(
                "ConstraintSpec::new",
                "U, V, b with matching row counts",
                format!("{}x{}, {}x{}, {}", u.nrows(), u.ncols(), v.nrows(), v.ncols(), b.len()),
            ));
        }
        if r.ncols() != n || r.nrows() != z.len() {
            return Err(Error::dims(
                "ConstraintSpec::new",
                format!("R with {n} cols and rhs to match"),
                format!("{}x{} vs {}", r.nrows(), r.ncols(), z.len()),
            ));
        }
        if aw.ncols() != n || aw.nrows() != bw.len() || aw.nrows() == 0 {
            return Err(Error::dims(
                "ConstraintSpec::new",
                format!("Aw with {n} cols and rhs to match"),
                format!("{}x{} vs {}", aw.nrows(), aw.ncols(), bw.len()),
            ));
        }
        let w_set = Polytope::new(aw.clone(), bw.clone())?;
        if !w_set.is_bounded()? {
            let dir = w_set
                .vertices()
                .ok()
                .and_then(|_| None)
                .unwrap_or_else(|| vec![f64::NAN; n]);
            return Err(Error::UnboundedPolytope { direction: dir });
        }
        if w_set.vertices()?.is_empty() {
            return Err(Error::EmptyPolytope);
        }
        Ok(ConstraintSpec {
            u,
            v,
            b,
            r,
            z,
            aw,
            bw,
            w_set,
        })
    }

    /// Stage constraint row count `s`.
    pub fn num_stage_rows(&self) -> usize {
        self.u.nrows()
    }

    /// Terminal constraint row count `r`.
    pub fn num_terminal_rows(&self) -> usize {
        self.r.nrows()
    }

    /// Disturbance facet count `q_w`.
    pub fn num_facets(&self) -> usize {
        self.aw.nrows()
    }

    pub fn w_set(&self) -> &Polytope {
        &self.w_set
    }
}

/// The stacked stage/terminal selectors `(bU, bV, rhs)` with
/// `bU x + bV u <= rhs` equivalent to all per-stage and terminal rows.
pub fn stacked_constraints(
    spec: &ConstraintSpec,
    n: usize,
    m: usize,
    n_steps: usize,
) -> (DMatrix<f64>, DMatrix<f64>, DVector<f64>) {
    let s = spec.num_stage_rows();
    let r = spec.num_terminal_rows();
    let rows = s * n_steps + r;
    let mut big_u = DMatrix::<f64>::zeros(rows, n * (n_steps + 1));
    let mut big_v = DMatrix::<f64>::zeros(rows, m * (n_steps + 1));
    let mut rhs = DVector::<f64>::zeros(rows);
    for k in 0..n_steps {
        big_u.view_mut((k * s, k * n), (s, n)).copy_from(&spec.u);
        big_v.view_mut((k * s, k * m), (s, m)).copy_from(&spec.v);
        rhs.rows_mut(k * s, s).copy_from(&spec.b);
    }
    big_u
        .view_mut((s * n_steps, n_steps * n), (r, n))
        .copy_from(&spec.r);
    rhs.rows_mut(s * n_steps, r).copy_from(&spec.z);
    (big_u, big_v, rhs)
}

/// Constraints folded through the lifted dynamics: feasibility of `(u, w)`
/// from `x0` is exactly `F u + G w <= c`.
#[derive(Clone, Debug)]
pub struct ConstraintData {
    pub f: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub c: DVector<f64>,
}

pub fn build_constraint_data(
    spec: &ConstraintSpec,
    lifted: &LiftedSystem,
    x0: &DVector<f64>,
) -> Result<ConstraintData> {
    let n = lifted.num_states();
    if spec.u.ncols() != n {
        return Err(Error::dims(
            "build_constraint_data",
            format!("stage constraints over {n} states"),
            format!("{}", spec.u.ncols()),
        ));
    }
    if spec.v.ncols() != lifted.num_inputs() {
        return Err(Error::dims(
            "build_constraint_data",
            format!("stage constraints over {} inputs", lifted.num_inputs()),
            format!("{}", spec.v.ncols()),
        ));
    }
    if x0.len() != n {
        return Err(Error::dims(
            "build_constraint_data",
            format!("x0 of length {n}"),
            format!("{}", x0.len()),
        ));
    }
    let (big_u, big_v, rhs) = stacked_constraints(spec, n, lifted.num_inputs(), lifted.horizon());
    let f = &big_u * &lifted.big_b + big_v;
    let g = &big_u * &lifted.big_ed;
    let c = rhs - big_u * (&lifted.big_a * x0);
    Ok(ConstraintData { f, g, c })
}
