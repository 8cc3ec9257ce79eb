//! Shared support for the integration suites: an independent active-set QP
//! oracle, an independent batch response builder, and seeded random
//! instance generators.
//!
//! Nothing here calls into the crate's own lifted-matrix or solver code
//! paths beyond constructing the public types under test, so agreement
//! between a suite and these helpers is meaningful evidence rather than a
//! tautology.

#![allow(dead_code)] // each test binary uses its own slice of this module

use std::collections::BTreeMap;

use dcs::binmat::BinaryMatrix;
use dcs::infostruct::InformationStructure;
use dcs::lifted::Plant;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------------------
// Active-set QP oracle
// ---------------------------------------------------------------------------

/// Solution of the oracle on `min ½xᵀHx + fᵀx  s.t.  A x = b, G x ≤ h`.
pub struct ActiveSetResult {
    pub x: DVector<f64>,
    pub objective: f64,
    pub iterations: usize,
}

/// Primal active-set method for strictly convex QPs, started from a point
/// that satisfies every constraint. Equalities stay in the working set
/// permanently; inequalities enter when they block a step and leave when
/// their multiplier goes negative. Deliberately plain: dense LU on the
/// bordered KKT system each iteration.
pub fn active_set_qp(
    h: &DMatrix<f64>,
    f: &DVector<f64>,
    a_eq: &DMatrix<f64>,
    b_eq: &DVector<f64>,
    g_in: &DMatrix<f64>,
    h_in: &DVector<f64>,
    x_start: &DVector<f64>,
) -> ActiveSetResult {
    let nv = h.nrows();
    let ne = a_eq.nrows();
    let ni = g_in.nrows();
    let feas_tol = 1e-8;
    if ne > 0 {
        let eq_err = (a_eq * x_start - b_eq).amax();
        assert!(eq_err <= feas_tol, "oracle start violates equalities by {eq_err:.3e}");
    }
    if ni > 0 {
        let in_err = (g_in * x_start - h_in).max();
        assert!(in_err <= feas_tol, "oracle start violates inequalities by {in_err:.3e}");
    }

    let mut x = x_start.clone();
    let mut working: Vec<usize> = (0..ni)
        .filter(|&i| (g_in.row(i) * &x)[0] - h_in[i] > -1e-10)
        .collect();

    for iteration in 1..=2_000 {
        // KKT system for the step p and multipliers on [equalities; working].
        let nw = ne + working.len();
        let dim = nv + nw;
        let mut kkt = DMatrix::<f64>::zeros(dim, dim);
        kkt.view_mut((0, 0), (nv, nv)).copy_from(h);
        for (r, row) in (0..ne).enumerate() {
            for c in 0..nv {
                kkt[(nv + r, c)] = a_eq[(row, c)];
                kkt[(c, nv + r)] = a_eq[(row, c)];
            }
        }
        for (r, &row) in working.iter().enumerate() {
            for c in 0..nv {
                kkt[(nv + ne + r, c)] = g_in[(row, c)];
                kkt[(c, nv + ne + r)] = g_in[(row, c)];
            }
        }
        let mut rhs = DVector::<f64>::zeros(dim);
        let grad = h * &x + f;
        for i in 0..nv {
            rhs[i] = -grad[i];
        }
        let sol = kkt
            .full_piv_lu()
            .solve(&rhs)
            .expect("degenerate working set in the oracle");
        let p = sol.rows(0, nv).into_owned();

        if p.amax() <= 1e-11 * (1.0 + x.amax()) {
            // Stationary on the working set: optimal unless some inequality
            // multiplier is negative.
            let mut drop: Option<(usize, f64)> = None;
            for (r, &row) in working.iter().enumerate() {
                let lambda = sol[nv + ne + r];
                if lambda < -1e-9 && drop.map_or(true, |(_, worst)| lambda < worst) {
                    drop = Some((row, lambda));
                }
            }
            match drop {
                None => {
                    let objective = 0.5 * (&x.transpose() * h * &x)[0] + f.dot(&x);
                    return ActiveSetResult { x, objective, iterations: iteration };
                }
                Some((row, _)) => working.retain(|&r| r != row),
            }
            continue;
        }

        // Longest step along p that stays feasible for the inactive rows.
        let mut alpha = 1.0_f64;
        let mut blocking: Option<usize> = None;
        for row in 0..ni {
            if working.contains(&row) {
                continue;
            }
            let gp = (g_in.row(row) * &p)[0];
            if gp > 1e-12 {
                let room = (h_in[row] - (g_in.row(row) * &x)[0]) / gp;
                if room < alpha {
                    alpha = room.max(0.0);
                    blocking = Some(row);
                }
            }
        }
        x += alpha * &p;
        if let Some(row) = blocking {
            working.push(row);
        }
    }
    panic!("active-set oracle failed to converge in 2000 iterations");
}

// ---------------------------------------------------------------------------
// Independent batch response
// ---------------------------------------------------------------------------

/// Stacked maps `x_stack = free * x0 + forced * u_stack` (disturbance-free)
/// over `k = 0..=N`, computed by literally simulating the recursion once per
/// basis vector — no shared code with the crate's lifted builder.
pub fn batch_response(plant: &Plant, n_steps: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = plant.num_states();
    let m = plant.num_inputs();
    let rows = n * (n_steps + 1);
    let simulate = |x0: &DVector<f64>, u: &[DVector<f64>]| -> DVector<f64> {
        let mut out = DVector::<f64>::zeros(rows);
        let mut x = x0.clone();
        out.rows_mut(0, n).copy_from(&x);
        for k in 0..n_steps {
            x = &plant.a * &x + &plant.b * &u[k];
            out.rows_mut((k + 1) * n, n).copy_from(&x);
        }
        out
    };
    let zero_u = vec![DVector::<f64>::zeros(m); n_steps];
    let mut free = DMatrix::<f64>::zeros(rows, n);
    for j in 0..n {
        let mut e = DVector::<f64>::zeros(n);
        e[j] = 1.0;
        free.set_column(j, &simulate(&e, &zero_u));
    }
    let mut forced = DMatrix::<f64>::zeros(rows, m * n_steps);
    let zero_x = DVector::<f64>::zeros(n);
    for k in 0..n_steps {
        for i in 0..m {
            let mut u = zero_u.clone();
            u[k][i] = 1.0;
            forced.set_column(k * m + i, &simulate(&zero_x, &u));
        }
    }
    (free, forced)
}

// ---------------------------------------------------------------------------
// Random instances
// ---------------------------------------------------------------------------

/// Dense matrix with entries uniform in `[-scale, scale]`.
pub fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.random_range(-scale..scale))
}

/// Sparse-ish matrix: each entry present with probability `density`, and
/// kept well away from zero so pattern reads are unambiguous.
pub fn random_sparse_matrix(
    rng: &mut ChaCha8Rng,
    r: usize,
    c: usize,
    density: f64,
) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| {
        if rng.random::<f64>() < density {
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            sign * rng.random_range(0.2..1.0)
        } else {
            0.0
        }
    })
}

/// Random plant with sparse A, B, C (identity D, zero H). Guarantees B and
/// C are nonzero so inputs reach outputs at some lag.
pub fn random_plant(rng: &mut ChaCha8Rng, n: usize, m: usize, p: usize) -> Plant {
    loop {
        let a = random_sparse_matrix(rng, n, n, 0.5);
        let b = random_sparse_matrix(rng, n, m, 0.6);
        let c = random_sparse_matrix(rng, p, n, 0.6);
        if b.amax() == 0.0 || c.amax() == 0.0 {
            continue;
        }
        return Plant::new(a, b, c, DMatrix::identity(n, n), DMatrix::zeros(p, n)).unwrap();
    }
}

pub fn random_pattern(rng: &mut ChaCha8Rng, r: usize, c: usize, density: f64) -> BinaryMatrix {
    BinaryMatrix::from_fn(r, c, |_, _| rng.random::<f64>() < density)
}

/// Independent structure: every causal block drawn independently.
pub fn random_structure(
    rng: &mut ChaCha8Rng,
    n_steps: usize,
    m: usize,
    p: usize,
    density: f64,
) -> InformationStructure {
    let mut blocks = BTreeMap::new();
    for k in 0..n_steps {
        for j in 0..=k {
            blocks.insert((k, j), random_pattern(rng, m, p, density));
        }
    }
    InformationStructure::custom(blocks, n_steps, m, p).unwrap()
}

/// Unit-diagonal symmetric communication topology over `m` nodes.
pub fn random_topology(rng: &mut ChaCha8Rng, m: usize, density: f64) -> BinaryMatrix {
    let mut z = BinaryMatrix::identity(m);
    for i in 0..m {
        for j in 0..i {
            if rng.random::<f64>() < density {
                z.set(i, j, true);
                z.set(j, i, true);
            }
        }
    }
    z
}

/// Closes a structure under the invariance conditions, yielding a QI
/// instance that still contains the original pattern. Fixpoint of
/// `S_{k,j} |= S_{k,h} Δ_g S_{h-g-1,j}` over all admissible `(h, g)`.
pub fn qi_closure(
    info: &InformationStructure,
    plant: &Plant,
    tol: f64,
) -> InformationStructure {
    let n_steps = info.horizon();
    let (m, p) = (info.num_inputs(), info.num_outputs());
    let mut blocks: BTreeMap<(usize, usize), BinaryMatrix> = BTreeMap::new();
    for k in 0..n_steps {
        for j in 0..=k {
            blocks.insert((k, j), info.block(k, j).clone());
        }
    }
    let deltas: Vec<BinaryMatrix> = (0..n_steps)
        .map(|g| dcs::lifted::delta(plant, g, tol, dcs::lifted::DeltaMode::Numeric))
        .collect();
    loop {
        let mut changed = false;
        for k in 1..n_steps {
            for j in 0..k {
                for h in (j + 1)..=k {
                    for g in 0..=(h - j - 1) {
                        let product = blocks[&(k, h)]
                            .bool_mul(&deltas[g])
                            .unwrap()
                            .bool_mul(&blocks[&(h - g - 1, j)])
                            .unwrap();
                        let target = blocks.get_mut(&(k, j)).unwrap();
                        for a in 0..m {
                            for b in 0..p {
                                if product.get(a, b) && !target.get(a, b) {
                                    target.set(a, b, true);
                                    changed = true;
                                }
                            }
                        }
                    }
                }
            }
        }
        if !changed {
            return InformationStructure::custom(blocks, n_steps, m, p).unwrap();
        }
    }
}
