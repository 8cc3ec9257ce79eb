//! Plain H-polytopes `{x : Ax <= b}` and the handful of exact operations the
//! rest of the crate needs: vertex enumeration, boundedness, membership, and
//! seeded (approximately uniform) sampling.
//!
//! Everything here is combinatorial or reduces to the QP solver, so no LP
//! code is required. Vertex enumeration visits every choice of `dim` rows,
//! solves the square system, and keeps the feasible solutions — exponential
//! in principle, fine for the disturbance sets this crate works with, and
//! guarded by an explicit budget.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::qpsolve::{self, QpProblem, SolveStatus, SolverSettings};

/// Budget on row-subset enumeration; `C(rows, dim)` beyond this errors out.
const COMBINATION_BUDGET: u128 = 2_000_000;

#[derive(Clone, Debug)]
pub struct Polytope {
    a: DMatrix<f64>,
    b: DVector<f64>,
}

impl Polytope {
    pub fn new(a: DMatrix<f64>, b: DVector<f64>) -> Result<Self> {
        if a.ncols() == 0 {
            return Err(Error::dims(
                "Polytope::new",
                "dimension >= 1".to_string(),
                "0".to_string(),
            ));
        }
        if a.nrows() != b.len() {
            return Err(Error::dims(
                "Polytope::new",
                format!("{} rows in b", a.nrows()),
                format!("{}", b.len()),
            ));
        }
        Ok(Polytope { a, b })
    }

    pub fn dim(&self) -> usize {
        self.a.ncols()
    }

    pub fn num_rows(&self) -> usize {
        self.a.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn rhs(&self) -> &DVector<f64> {
        &self.b
    }

    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> bool {
        let s = &self.a * x - &self.b;
        s.iter().all(|&v| v <= tol)
    }

    /// All vertices, deduplicated. Exact for bounded polytopes; an unbounded
    /// polytope yields whatever vertices its inequality system has.
    pub fn vertices(&self) -> Result<Vec<DVector<f64>>> {
        vertices_of(&self.a, &self.b)
    }

    /// True when the recession cone `{d : Ad <= 0}` is trivial, i.e. the
    /// polytope contains no ray.
    pub fn is_bounded(&self) -> Result<bool> {
        let n = self.dim();
        let q = self.num_rows();
        // Intersect the cone with the unit cube; the intersection is {0}
        // exactly when no nonzero recession direction exists, and any
        // nonzero direction scales into the cube, where it must show up as
        // a nonzero vertex of the (compact) intersection.
        let mut rows = DMatrix::<f64>::zeros(q + 2 * n, n);
        rows.view_mut((0, 0), (q, n)).copy_from(&self.a);
        for i in 0..n {
            rows[(q + i, i)] = 1.0;
            rows[(q + n + i, i)] = -1.0;
        }
        let mut rhs = DVector::<f64>::zeros(q + 2 * n);
        for i in 0..(2 * n) {
            rhs[q + i] = 1.0;
        }
        for v in vertices_of(&rows, &rhs)? {
            if v.amax() > 1e-6 {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// Center and radius of a largest inscribed ball, found with the QP
    /// solver (a vanishing Tikhonov term makes the LP strictly convex).
    /// Errors with [`Error::EmptyPolytope`] when there is no feasible point.
    pub fn chebyshev_center(&self) -> Result<(DVector<f64>, f64)> {
        let n = self.dim();
        let q = self.num_rows();
        let nv = n + 1;
        let p = DMatrix::<f64>::identity(nv, nv) * 2e-9;
        let mut lin = DVector::<f64>::zeros(nv);
        lin[n] = -1.0;
        let mut a_in = DMatrix::<f64>::zeros(q + 1, nv);
        let mut b_in = DVector::<f64>::zeros(q + 1);
        for i in 0..q {
            let norm = self.a.row(i).norm();
            for j in 0..n {
                a_in[(i, j)] = self.a[(i, j)];
            }
            a_in[(i, n)] = norm;
            b_in[i] = self.b[i];
        }
        a_in[(q, n)] = -1.0; // r >= 0
        let prob = QpProblem::new(p, lin, DMatrix::zeros(0, nv), DVector::zeros(0), a_in, b_in)
            .expect("shapes are consistent by construction");
        let sol = qpsolve::solve(&prob, &SolverSettings::default());
        match sol.status {
            SolveStatus::Infeasible => Err(Error::EmptyPolytope),
            _ => Ok((DVector::from_fn(n, |i, _| sol.x[i]), sol.x[n].max(0.0))),
        }
    }
}

/// Seeded sampler. Bounded full-dimensional polytopes are sampled uniformly
/// by rejection from the vertex bounding box; when rejection is hopeless (or
/// the vertex budget is blown) it degrades to hit-and-run from the Chebyshev
/// center, which is approximately uniform after mixing.
pub struct Sampler {
    poly: Polytope,
    mode: SampleMode,
}

enum SampleMode {
    /// Uniform over [lo, hi] with rejection into the polytope.
    Rejection { lo: DVector<f64>, hi: DVector<f64> },
    /// Random-direction chord sampling from a strictly interior point.
    HitAndRun { current: DVector<f64> },
    /// The polytope is (numerically) a single point.
    Point(DVector<f64>),
}

impl Sampler {
    pub fn new(poly: &Polytope) -> Result<Self> {
        match poly.vertices() {
            Ok(vs) if !vs.is_empty() => {
                let n = poly.dim();
                let mut lo = vs[0].clone();
                let mut hi = vs[0].clone();
                for v in &vs[1..] {
                    for i in 0..n {
                        lo[i] = lo[i].min(v[i]);
                        hi[i] = hi[i].max(v[i]);
                    }
                }
                if (0..n).all(|i| hi[i] - lo[i] <= 1e-12) {
                    return Ok(Sampler {
                        poly: poly.clone(),
                        mode: SampleMode::Point(lo),
                    });
                }
                Ok(Sampler {
                    poly: poly.clone(),
                    mode: SampleMode::Rejection { lo, hi },
                })
            }
            Ok(_) => Err(Error::EmptyPolytope),
            Err(Error::VertexBudget { .. }) => Self::hit_and_run_fallback(poly),
            Err(e) => Err(e),
        }
    }

    fn hit_and_run_fallback(poly: &Polytope) -> Result<Self> {
        let (center, radius) = poly.chebyshev_center()?;
        if radius <= 1e-12 {
            return Ok(Sampler {
                poly: poly.clone(),
                mode: SampleMode::Point(center),
            });
        }
        let mut s = Sampler {
            poly: poly.clone(),
            mode: SampleMode::HitAndRun { current: center },
        };
        // Burn-in happens on the first draw's thinning; nothing else needed.
        let _ = &mut s;
        Ok(s)
    }

    /// One draw. Deterministic given the RNG state.
    pub fn draw<R: Rng>(&mut self, rng: &mut R) -> DVector<f64> {
        match &mut self.mode {
            SampleMode::Point(x) => x.clone(),
            SampleMode::Rejection { lo, hi } => {
                let n = lo.len();
                for _ in 0..10_000 {
                    let x = DVector::from_fn(n, |i, _| {
                        if hi[i] - lo[i] <= 1e-15 {
                            lo[i]
                        } else {
                            rng.random_range(lo[i]..=hi[i])
                        }
                    });
                    if self.poly.contains(&x, 1e-12) {
                        return x;
                    }
                }
                // Thin polytope: switch over to hit-and-run permanently.
                let start = match self.poly.chebyshev_center() {
                    Ok((c, _)) => c,
                    Err(_) => DVector::zeros(n),
                };
                self.mode = SampleMode::HitAndRun { current: start };
                self.draw(rng)
            }
            SampleMode::HitAndRun { current } => {
                let n = current.len();
                let mut x = current.clone();
                for _ in 0..16 {
                    // Symmetric direction from the cube; symmetry is all
                    // hit-and-run needs for a uniform stationary law.
                    let mut dir = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
                    let norm = dir.norm();
                    if norm < 1e-12 {
                        continue;
                    }
                    dir /= norm;
                    let slack = &self.poly.b - &self.poly.a * &x;
                    let ad = &self.poly.a * &dir;
                    let mut t_min = f64::NEG_INFINITY;
                    let mut t_max = f64::INFINITY;
                    for i in 0..slack.len() {
                        if ad[i] > 1e-12 {
                            t_max = t_max.min(slack[i] / ad[i]);
                        } else if ad[i] < -1e-12 {
                            t_min = t_min.max(slack[i] / ad[i]);
                        }
                    }
                    if !(t_min.is_finite() && t_max.is_finite()) || t_max <= t_min {
                        continue;
                    }
                    let t = rng.random_range(t_min..=t_max);
                    x += t * &dir;
                }
                *current = x.clone();
                x
            }
        }
    }
}

/// Vertex enumeration over explicit rows, shared by `vertices` and the
/// boundedness test.
fn vertices_of(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<Vec<DVector<f64>>> {
    let q = a.nrows();
    let n = a.ncols();
    if q < n {
        return Ok(Vec::new());
    }
    if binomial(q, n) > COMBINATION_BUDGET {
        return Err(Error::VertexBudget { rows: q, dim: n });
    }
    let scale = 1.0 + b.amax().max(a.amax());
    let mut out: Vec<DVector<f64>> = Vec::new();
    let mut idx: Vec<usize> = (0..n).collect();
    loop {
        let sub_a = DMatrix::from_fn(n, n, |i, j| a[(idx[i], j)]);
        let sub_b = DVector::from_fn(n, |i, _| b[idx[i]]);
        if let Some(x) = sub_a.clone().full_piv_lu().solve(&sub_b) {
            let resid = (&sub_a * &x - &sub_b).amax();
            if resid <= 1e-8 * scale && x.iter().all(|v| v.is_finite()) {
                let viol = (a * &x - b).amax_signed();
                if viol <= 1e-8 * scale {
                    let dup = out
                        .iter()
                        .any(|v| (v - &x).amax() <= 1e-7 * (1.0 + x.amax()));
                    if !dup {
                        out.push(x);
                    }
                }
            }
        }
        if !advance(&mut idx, q) {
            break;
        }
    }
    Ok(out)
}

/// Next lexicographic combination; false when exhausted.
fn advance(idx: &mut [usize], q: usize) -> bool {
    let n = idx.len();
    let mut i = n;
    while i > 0 {
        i -= 1;
        if idx[i] < q - (n - i) {
            idx[i] += 1;
            for j in (i + 1)..n {
                idx[j] = idx[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

fn binomial(n: usize, k: usize) -> u128 {
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc.saturating_mul((n - i) as u128) / (i as u128 + 1);
        if acc > COMBINATION_BUDGET * 2 {
            return acc;
        }
    }
    acc
}

/// Largest signed entry (violation) of a vector; negative when all rows hold.
trait AmaxSigned {
    fn amax_signed(&self) -> f64;
}

impl AmaxSigned for DVector<f64> {
    fn amax_signed(&self) -> f64 {
        self.iter().fold(f64::NEG_INFINITY, |acc, &v| acc.max(v))
    }
}
