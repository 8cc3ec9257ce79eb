//! Output-feedback controllers, disturbance-feedback policies, and the
//! closed-loop bijection between them.
//!
//! An output-feedback controller applies `u = L y + g` to the stacked
//! measurements; a disturbance-feedback policy applies `u = Q (P w) + v` to
//! the stacked disturbance response. The two parametrizations describe the
//! same set of closed loops, related through the closed-loop map
//! `h(X, Y) = -X (I - Y X)^{-1}`:
//!
//! ```text
//!   L = Q (CB Q + I)^{-1} = h(-Q, CB)      g = v - L (CB v + boldC boldA x0)
//!   Q = L (I - CB L)^{-1} = -h(L, CB)      v = Q (CB g + boldC boldA x0) + g
//! ```
//!
//! Because `CB` is strictly block lower triangular, both `CB Q + I` and
//! `I - CB L` are unit block triangular, so the maps never fail and — solved
//! by block substitution rather than a dense inverse — preserve causal zero
//! blocks exactly, not merely to rounding.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::binmat::BinaryMatrix;
use crate::error::{Error, Result};
use crate::infostruct::parse_block_key;
use crate::lifted::LiftedSystem;

/// The block pattern every finite-horizon controller lives in: block
/// `(k, j)` may be nonzero only for `j <= k <= N-1`. Block row `N` (the
/// unapplied terminal input) and block column `N` (the unusable terminal
/// measurement) are zero.
pub fn causal_pattern(n_steps: usize, m: usize, p: usize) -> BinaryMatrix {
    BinaryMatrix::from_fn(m * (n_steps + 1), p * (n_steps + 1), |i, j| {
        let (bk, bj) = (i / m, j / p);
        bk < n_steps && bj <= bk
    })
}

/// Scale-aware membership tolerance: sparsity statements are exact in exact
/// arithmetic, so floating-point checks gauge "zero" against the matrix's
/// own magnitude.
pub fn membership_tol(mat: &DMatrix<f64>) -> f64 {
    1e-7 * mat.amax()
}

/// Whether every entry of `mat` outside `pattern` is below `tol` in
/// magnitude; delegates to [`BinaryMatrix::member`].
pub fn check_membership(mat: &DMatrix<f64>, pattern: &BinaryMatrix, tol: f64) -> Result<bool> {
    pattern.member(mat, tol)
}

fn validate_causal(op: &'static str, mat: &DMatrix<f64>, n_steps: usize, m: usize, p: usize) -> Result<()> {
    let (rows, cols) = (m * (n_steps + 1), p * (n_steps + 1));
    if mat.shape() != (rows, cols) {
        return Err(Error::dims(
            op,
            format!("{rows}x{cols}"),
            format!("{}x{}", mat.nrows(), mat.ncols()),
        ));
    }
    let pattern = causal_pattern(n_steps, m, p);
    for j in 0..cols {
        for i in 0..rows {
            if !pattern.get(i, j) && mat[(i, j)] != 0.0 {
                return Err(Error::PatternViolation {
                    row: i,
                    col: j,
                    value: mat[(i, j)],
                });
            }
        }
    }
    Ok(())
}

fn validate_affine(op: &'static str, vec: &DVector<f64>, n_steps: usize, m: usize) -> Result<()> {
    let len = m * (n_steps + 1);
    if vec.len() != len {
        return Err(Error::dims(op, format!("length {len}"), format!("{}", vec.len())));
    }
    for i in (len - m)..len {
        if vec[i] != 0.0 {
            return Err(Error::PatternViolation {
                row: i,
                col: 0,
                value: vec[i],
            });
        }
    }
    Ok(())
}

/// Stacked output feedback `u = L y + g`.
#[derive(Clone, Debug, PartialEq)]
pub struct OutputFeedbackController {
    l: DMatrix<f64>,
    g: DVector<f64>,
    n_steps: usize,
    m: usize,
    p: usize,
}

/// Stacked disturbance feedback `u = Q (P w) + v`.
#[derive(Clone, Debug, PartialEq)]
pub struct DisturbanceFeedbackPolicy {
    q: DMatrix<f64>,
    v: DVector<f64>,
    n_steps: usize,
    m: usize,
    p: usize,
}

macro_rules! stacked_affine_impl {
    ($ty:ident, $mat:ident, $vec:ident, $op:literal) => {
        impl $ty {
            /// Validates the causal block pattern — entries outside it must
            /// be exactly zero — and the zero terminal block of the affine
            /// term.
            pub fn new(
                $mat: DMatrix<f64>,
                $vec: DVector<f64>,
                n_steps: usize,
                m: usize,
                p: usize,
            ) -> Result<Self> {
                validate_causal($op, &$mat, n_steps, m, p)?;
                validate_affine($op, &$vec, n_steps, m)?;
                Ok(Self { $mat, $vec, n_steps, m, p })
            }

            pub fn zero(n_steps: usize, m: usize, p: usize) -> Self {
                Self {
                    $mat: DMatrix::zeros(m * (n_steps + 1), p * (n_steps + 1)),
                    $vec: DVector::zeros(m * (n_steps + 1)),
                    n_steps,
                    m,
                    p,
                }
            }

            pub fn $mat(&self) -> &DMatrix<f64> {
                &self.$mat
            }

            pub fn $vec(&self) -> &DVector<f64> {
                &self.$vec
            }

            /// The `(k, j)` gain block.
            pub fn block(&self, k: usize, j: usize) -> DMatrix<f64> {
                self.$mat
                    .view((k * self.m, j * self.p), (self.m, self.p))
                    .clone_owned()
            }

            pub fn horizon(&self) -> usize {
                self.n_steps
            }

            pub fn num_inputs(&self) -> usize {
                self.m
            }

            pub fn num_outputs(&self) -> usize {
                self.p
            }

            /// Whether the gain matrix lies in `pattern` up to `tol`.
            pub fn lies_in(&self, pattern: &BinaryMatrix, tol: f64) -> Result<bool> {
                check_membership(&self.$mat, pattern, tol)
            }
        }

        impl Serialize for $ty {
            fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
                StackedAffineRepr::pack(&self.$mat, &self.$vec, self.n_steps, self.m, self.p)
                    .serialize(serializer)
            }
        }

        impl<'de> Deserialize<'de> for $ty {
            fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
                let repr = StackedAffineRepr::deserialize(deserializer)?;
                let ($mat, $vec) = repr.unpack().map_err(serde::de::Error::custom)?;
                Self::new($mat, $vec, repr.n_steps, repr.m, repr.p).map_err(serde::de::Error::custom)
            }
        }
    };
}

stacked_affine_impl!(OutputFeedbackController, l, g, "OutputFeedbackController::new");
stacked_affine_impl!(DisturbanceFeedbackPolicy, q, v, "DisturbanceFeedbackPolicy::new");

/// Interchange form shared by both parametrizations: causal gain blocks
/// keyed `"k,j"` plus the full stacked affine term.
#[derive(Serialize, Deserialize)]
struct StackedAffineRepr {
    #[serde(rename = "N")]
    n_steps: usize,
    m: usize,
    p: usize,
    blocks: BTreeMap<String, Vec<Vec<f64>>>,
    affine: Vec<f64>,
}

impl StackedAffineRepr {
    fn pack(mat: &DMatrix<f64>, vec: &DVector<f64>, n_steps: usize, m: usize, p: usize) -> Self {
        let mut blocks = BTreeMap::new();
        for k in 0..n_steps {
            for j in 0..=k {
                let block = mat.view((k * m, j * p), (m, p));
                blocks.insert(
                    format!("{k},{j}"),
                    (0..m).map(|i| (0..p).map(|c| block[(i, c)]).collect()).collect(),
                );
            }
        }
        StackedAffineRepr {
            n_steps,
            m,
            p,
            blocks,
            affine: vec.iter().copied().collect(),
        }
    }

    fn unpack(&self) -> Result<(DMatrix<f64>, DVector<f64>)> {
        let (n_steps, m, p) = (self.n_steps, self.m, self.p);
        let mut mat = DMatrix::zeros(m * (n_steps + 1), p * (n_steps + 1));
        for (key, rows) in &self.blocks {
            let (k, j) = parse_block_key(key)?;
            if j > k || k >= n_steps {
                return Err(Error::BadBlockKey { k, j, n_steps });
            }
            if rows.len() != m || rows.iter().any(|r| r.len() != p) {
                return Err(Error::Schema(format!(
                    "gain block ({k},{j}) must be {m}x{p}"
                )));
            }
            let mut view = mat.view_mut((k * m, j * p), (m, p));
            for (i, row) in rows.iter().enumerate() {
                for (c, &value) in row.iter().enumerate() {
                    view[(i, c)] = value;
                }
            }
        }
        if self.affine.len() != m * (n_steps + 1) {
            return Err(Error::Schema(format!(
                "affine term must have length {}, got {}",
                m * (n_steps + 1),
                self.affine.len()
            )));
        }
        Ok((mat, DVector::from_column_slice(&self.affine)))
    }
}

/// The closed-loop map `h(X, Y) = -X (I - Y X)^{-1}` on arbitrary real
/// matrices. Fails only when `I - Y X` is singular, which cannot happen for
/// causal `X` against a strictly causal `Y X`.
pub fn closed_loop_map(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if y.shape() != (x.ncols(), x.nrows()) {
        return Err(Error::dims(
            "closed_loop_map",
            format!("{}x{}", x.ncols(), x.nrows()),
            format!("{}x{}", y.nrows(), y.ncols()),
        ));
    }
    let m = DMatrix::identity(x.ncols(), x.ncols()) - y * x;
    // X M^{-1} via the transposed system M^T Z = X^T.
    let z = m
        .transpose()
        .lu()
        .solve(&x.transpose())
        .ok_or(Error::SingularClosedLoop)?;
    Ok(-z.transpose())
}

/// Solves `X (I + W) = R` for `X`, where `W` is strictly lower block
/// triangular with square blocks of size `block`. The recursion fills block
/// columns right to left; a block column only ever receives contributions
/// from columns strictly to its right, so zero causal blocks of `R` produce
/// exactly zero blocks of `X`.
fn solve_right_unit_lower(strict: &DMatrix<f64>, rhs: &DMatrix<f64>, block: usize) -> DMatrix<f64> {
    let nb = strict.ncols() / block;
    let rows = rhs.nrows();
    let mut x = rhs.clone_owned();
    for j in (0..nb).rev() {
        let mut col = rhs.view((0, j * block), (rows, block)).clone_owned();
        for jp in (j + 1)..nb {
            let w = strict.view((jp * block, j * block), (block, block));
            col -= x.view((0, jp * block), (rows, block)) * w;
        }
        x.view_mut((0, j * block), (rows, block)).copy_from(&col);
    }
    x
}

fn stacked_initial_response(lifted: &LiftedSystem, x0: &DVector<f64>) -> Result<DVector<f64>> {
    if x0.len() != lifted.num_states() {
        return Err(Error::dims(
            "initial state",
            format!("length {}", lifted.num_states()),
            format!("{}", x0.len()),
        ));
    }
    Ok(&lifted.big_c * (&lifted.big_a * x0))
}

fn check_compatible(op: &'static str, n_steps: usize, m: usize, p: usize, lifted: &LiftedSystem) -> Result<()> {
    if (n_steps, m, p) != (lifted.horizon(), lifted.num_inputs(), lifted.num_outputs()) {
        return Err(Error::dims(
            op,
            format!(
                "horizon {} with {}x{} gain blocks",
                lifted.horizon(),
                lifted.num_inputs(),
                lifted.num_outputs()
            ),
            format!("horizon {n_steps} with {m}x{p}"),
        ));
    }
    Ok(())
}

/// Maps `(Q, v)` to the output-feedback controller realizing the same closed
/// loop from `x0`: `L = Q (CB Q + I)^{-1}`, `g = v - L (CB v + boldC boldA x0)`.
pub fn q_to_l(
    policy: &DisturbanceFeedbackPolicy,
    lifted: &LiftedSystem,
    x0: &DVector<f64>,
) -> Result<OutputFeedbackController> {
    check_compatible("q_to_l", policy.n_steps, policy.m, policy.p, lifted)?;
    let strict = &lifted.cb * &policy.q;
    let l = solve_right_unit_lower(&strict, &policy.q, policy.p);
    let g = &policy.v - &l * (&lifted.cb * &policy.v + stacked_initial_response(lifted, x0)?);
    OutputFeedbackController::new(l, g, policy.n_steps, policy.m, policy.p)
}

/// Maps `(L, g)` to the disturbance-feedback policy realizing the same
/// closed loop from `x0`: `Q = L (I - CB L)^{-1}`,
/// `v = Q (CB g + boldC boldA x0) + g`.
pub fn l_to_q(
    ctrl: &OutputFeedbackController,
    lifted: &LiftedSystem,
    x0: &DVector<f64>,
) -> Result<DisturbanceFeedbackPolicy> {
    check_compatible("l_to_q", ctrl.n_steps, ctrl.m, ctrl.p, lifted)?;
    let strict = -(&lifted.cb * &ctrl.l);
    let q = solve_right_unit_lower(&strict, &ctrl.l, ctrl.p);
    let v = &q * (&lifted.cb * &ctrl.g + stacked_initial_response(lifted, x0)?) + &ctrl.g;
    DisturbanceFeedbackPolicy::new(q, v, ctrl.n_steps, ctrl.m, ctrl.p)
}
