//! End-to-end acceptance suite: eight numbered criteria, each printing one
//! `criterion N: PASS — ...` line (run with `--nocapture` to see them; a
//! failed assertion prints the matching FAIL message instead).

mod common;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use dcs::binmat::BinaryMatrix;
use dcs::infostruct::{CommTopology, InformationStructure};
use dcs::lifted::{ConstraintSpec, DeltaMode, LiftedSystem, Plant};
use dcs::policy::{causal_pattern, l_to_q, membership_tol, q_to_l, OutputFeedbackController};
use dcs::problem::ProblemFile;
use dcs::qi::{
    qi_oracle, qi_test_comm, qi_test_general, qi_test_sensing, targeted_witness, ConditionIndices,
};
use dcs::qpsolve::{solve, QpProblem, SolveStatus, SolverSettings};
use dcs::robust::{assemble, extract, AssembleOptions, CostSpec};
use dcs::sim::{
    rollout_disturbance_feedback, rollout_output_feedback, verify_robust, VerifyMethod,
};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

use common::{
    active_set_qp, batch_response, qi_closure, random_matrix, random_pattern, random_plant,
    random_structure, random_topology, rng,
};

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

fn pass(criterion: usize, detail: String) {
    println!("criterion {criterion}: PASS — {detail}");
}

/// Axis-aligned box constraints on states, inputs, and disturbances.
fn box_constraints(n: usize, m: usize, x_lim: f64, u_lim: f64, w_lim: f64) -> ConstraintSpec {
    let mut u = DMatrix::<f64>::zeros(2 * n + 2 * m, n);
    let mut v = DMatrix::<f64>::zeros(2 * n + 2 * m, m);
    let mut b = DVector::<f64>::zeros(2 * n + 2 * m);
    for i in 0..n {
        u[(i, i)] = 1.0;
        u[(n + i, i)] = -1.0;
        b[i] = x_lim;
        b[n + i] = x_lim;
    }
    for i in 0..m {
        v[(2 * n + i, i)] = 1.0;
        v[(2 * n + m + i, i)] = -1.0;
        b[2 * n + i] = u_lim;
        b[2 * n + m + i] = u_lim;
    }
    let mut r = DMatrix::<f64>::zeros(2 * n, n);
    let mut z = DVector::<f64>::zeros(2 * n);
    let mut aw = DMatrix::<f64>::zeros(2 * n, n);
    let mut bw = DVector::<f64>::zeros(2 * n);
    for i in 0..n {
        r[(i, i)] = 1.0;
        r[(n + i, i)] = -1.0;
        z[i] = x_lim;
        z[n + i] = x_lim;
        aw[(i, i)] = 1.0;
        aw[(n + i, i)] = -1.0;
        bw[i] = w_lim;
        bw[n + i] = w_lim;
    }
    ConstraintSpec::new(u, v, b, r, z, aw, bw).unwrap()
}

#[test]
fn criterion_1_example_reproduction() {
    let started = Instant::now();
    let inst = ProblemFile::load(&fixture("example1.json"))
        .and_then(|f| f.build())
        .expect("criterion 1: FAIL — fixture does not load");
    let report = qi_test_general(&inst.info, &inst.plant, inst.delta_mode, inst.tol)
        .expect("criterion 1: FAIL — test errored");
    let elapsed = started.elapsed();
    assert!(
        report.quadratically_invariant,
        "criterion 1: FAIL — fixture not reported QI"
    );
    assert_eq!(
        report.conditions.len(),
        5,
        "criterion 1: FAIL — expected exactly 5 conditions"
    );
    assert!(
        report.conditions.iter().all(|c| c.holds),
        "criterion 1: FAIL — some condition does not hold"
    );
    assert!(
        elapsed.as_secs_f64() < 0.1,
        "criterion 1: FAIL — took {elapsed:?}, budget 0.1 s"
    );
    pass(1, format!("QI with 5/5 conditions holding in {elapsed:?}"));
}

#[test]
fn criterion_2_cross_test_equivalence() {
    let started = Instant::now();
    let mut r = rng(0x2222);
    let mut checked = 0_usize;
    let mut qi_seen = 0_usize;
    let mut non_qi_seen = 0_usize;

    // Constant sensing structures on horizons long enough for the shortcut
    // to be exact.
    for _ in 0..100 {
        let n = r.random_range(1..=4);
        let m = r.random_range(1..=4);
        let p = r.random_range(1..=4);
        let n_steps = r.random_range((n + 1)..=6);
        let plant = random_plant(&mut r, n, m, p);
        let density = r.random_range(0.2..0.9);
        let s = random_pattern(&mut r, m, p, density);
        let info = InformationStructure::constant(&s, n_steps);
        let general = qi_test_general(&info, &plant, DeltaMode::Numeric, 1e-9).unwrap();
        let sensing = qi_test_sensing(&s, &plant, n_steps, DeltaMode::Numeric, 1e-9).unwrap();
        assert_eq!(
            general.quadratically_invariant, sensing.quadratically_invariant,
            "criterion 2: FAIL — sensing disagrees with general (n={n}, m={m}, p={p}, N={n_steps})"
        );
        checked += 1;
        if general.quadratically_invariant { qi_seen += 1 } else { non_qi_seen += 1 }
    }

    // Propagation structures over random symmetric topologies; the paired
    // test is exact at every horizon.
    for _ in 0..100 {
        let n = r.random_range(1..=4);
        let m = r.random_range(1..=4);
        let p = r.random_range(1..=4);
        let n_steps = r.random_range(1..=6);
        let plant = random_plant(&mut r, n, m, p);
        let density = r.random_range(0.2..0.9);
        let s = random_pattern(&mut r, m, p, density);
        let z = CommTopology::new(random_topology(&mut r, m, 0.4)).unwrap();
        let info = InformationStructure::comm_propagation(&s, &z, n_steps).unwrap();
        let general = qi_test_general(&info, &plant, DeltaMode::Numeric, 1e-9).unwrap();
        let comm = qi_test_comm(&s, &z, &plant, n_steps, DeltaMode::Numeric, 1e-9).unwrap();
        assert_eq!(
            general.quadratically_invariant, comm.quadratically_invariant,
            "criterion 2: FAIL — comm disagrees with general (n={n}, m={m}, p={p}, N={n_steps})"
        );
        checked += 1;
        if general.quadratically_invariant { qi_seen += 1 } else { non_qi_seen += 1 }
    }

    let elapsed = started.elapsed();
    assert!(checked >= 200, "criterion 2: FAIL — only {checked} instances");
    assert!(
        qi_seen >= 10 && non_qi_seen >= 10,
        "criterion 2: FAIL — verdict mix too lopsided ({qi_seen} QI / {non_qi_seen} not)"
    );
    assert!(
        elapsed.as_secs_f64() < 30.0,
        "criterion 2: FAIL — took {elapsed:?}, budget 30 s"
    );
    pass(
        2,
        format!(
            "{checked} instances, zero disagreements ({qi_seen} QI / {non_qi_seen} not) in {elapsed:?}"
        ),
    );
}

#[test]
fn criterion_3_oracle_soundness() {
    let mut r = rng(0x3333);
    let mut passing = 0_usize;
    let mut failing = 0_usize;

    for trial in 0..60 {
        let n = r.random_range(1..=4);
        let m = r.random_range(1..=3);
        let p = r.random_range(1..=3);
        let n_steps = r.random_range(2..=5);
        let plant = random_plant(&mut r, n, m, p);
        let density = r.random_range(0.2..0.8);
        let raw = random_structure(&mut r, n_steps, m, p, density);
        // Alternate raw structures (mostly failing) with their QI closures
        // (passing by construction) so both branches get real coverage.
        let info = if trial % 2 == 0 { raw } else { qi_closure(&raw, &plant, 1e-9) };

        let report = qi_test_general(&info, &plant, DeltaMode::Numeric, 1e-9).unwrap();
        if report.quadratically_invariant {
            let outcome = qi_oracle(&info, &plant, 500, 7_000 + trial, 1e-9).unwrap();
            assert!(
                outcome.consistent,
                "criterion 3: FAIL — oracle found a violation on a passing instance (trial {trial})"
            );
            passing += 1;
        } else {
            let condition = report.failing().next().unwrap();
            let ConditionIndices::General { k, j, h, g } = condition.indices else {
                panic!("criterion 3: FAIL — general test returned non-general indices");
            };
            let entry = condition.violations[0];
            let witness =
                targeted_witness(&info, &plant, k, j, h, g, entry, 9_000 + trial, 1e-9).unwrap();
            let lifted = LiftedSystem::build(&plant, n_steps);
            let product = &witness.l * &lifted.cb * &witness.l_prime;
            let inside = info.big_s().member(&product, 1e-9).unwrap();
            assert!(
                !inside,
                "criterion 3: FAIL — witness product stayed in the pattern (trial {trial})"
            );
            failing += 1;
        }
    }

    assert!(
        passing >= 10 && failing >= 10,
        "criterion 3: FAIL — coverage too thin ({passing} passing / {failing} failing)"
    );
    pass(
        3,
        format!(
            "{passing} passing instances clean over 500 oracle trials each; \
             {failing} failing instances each yielded an escaping witness"
        ),
    );
}

#[test]
fn criterion_4_mapping_bijection() {
    let classes = [(1, 1, 1, 2), (2, 1, 1, 3), (2, 2, 2, 3), (3, 2, 2, 4), (4, 3, 2, 3)];
    let mut r = rng(0x4444);
    let mut controllers = 0_usize;
    let mut rollouts = 0_usize;

    for &(n, m, p, n_steps) in &classes {
        let pattern = causal_pattern(n_steps, m, p);
        for trial in 0..100 {
            let plant = random_plant(&mut r, n, m, p);
            let lifted = LiftedSystem::build(&plant, n_steps);
            let x0 = DVector::from_fn(n, |_, _| r.random_range(-1.0..1.0));

            let l = DMatrix::from_fn(pattern.nrows(), pattern.ncols(), |i, j| {
                if pattern.get(i, j) { r.random_range(-0.8..0.8) } else { 0.0 }
            });
            let g = DVector::from_fn(m * (n_steps + 1), |i, _| {
                if i < m * n_steps { r.random_range(-1.0..1.0) } else { 0.0 }
            });
            let ctrl = OutputFeedbackController::new(l, g, n_steps, m, p).unwrap();

            // l_to_q then q_to_l reproduces the controller.
            let policy = l_to_q(&ctrl, &lifted, &x0).unwrap();
            let back = q_to_l(&policy, &lifted, &x0).unwrap();
            let scale = 1.0 + ctrl.l().amax().max(ctrl.g().amax());
            let err = (back.l() - ctrl.l()).amax().max((back.g() - ctrl.g()).amax());
            assert!(
                err <= 1e-8 * scale,
                "criterion 4: FAIL — l→q→l error {err:.3e} on class {n},{m},{p},N={n_steps}"
            );

            // q_to_l then l_to_q reproduces the policy.
            let back_q = l_to_q(&q_to_l(&policy, &lifted, &x0).unwrap(), &lifted, &x0).unwrap();
            let scale_q = 1.0 + policy.q().amax().max(policy.v().amax());
            let err_q =
                (back_q.q() - policy.q()).amax().max((back_q.v() - policy.v()).amax());
            assert!(
                err_q <= 1e-8 * scale_q,
                "criterion 4: FAIL — q→l→q error {err_q:.3e} on class {n},{m},{p},N={n_steps}"
            );
            controllers += 1;

            // The two parameterizations drive the plant identically.
            if trial % 10 == 0 {
                let w: Vec<DVector<f64>> = (0..n_steps)
                    .map(|_| DVector::from_fn(n, |_, _| r.random_range(-0.5..0.5)))
                    .collect();
                let by_l = rollout_output_feedback(&plant, &ctrl, &x0, &w, None).unwrap();
                let by_q =
                    rollout_disturbance_feedback(&plant, &policy, &lifted, &x0, &w, None).unwrap();
                for (a, b) in by_l.inputs.iter().zip(&by_q.inputs) {
                    let du = a
                        .iter()
                        .zip(b)
                        .map(|(x, y)| (x - y).abs())
                        .fold(0.0_f64, f64::max);
                    assert!(
                        du <= 1e-8,
                        "criterion 4: FAIL — trajectories diverge by {du:.3e}"
                    );
                }
                rollouts += 1;
            }
        }
    }

    assert_eq!(controllers, 500, "criterion 4: FAIL — expected 100 per size class");
    pass(
        4,
        format!(
            "round trips identity to 1e-8 on {controllers} controllers \
             (5 size classes); {rollouts} paired rollouts agree"
        ),
    );
}

#[test]
fn criterion_5_qi_sparsity_transfer() {
    let mut r = rng(0x5555);
    let mut transfers = 0_usize;
    let mut escapes = 0_usize;

    for trial in 0..40 {
        let n = r.random_range(1..=3);
        let m = r.random_range(1..=3);
        let p = r.random_range(1..=3);
        let n_steps = r.random_range(2..=4);
        let plant = random_plant(&mut r, n, m, p);
        let lifted = LiftedSystem::build(&plant, n_steps);
        let x0 = DVector::from_fn(n, |_, _| r.random_range(-1.0..1.0));
        let raw = random_structure(&mut r, n_steps, m, p, 0.5);

        if trial % 2 == 0 {
            // QI instance by closure: every structured L maps to a
            // structured Q.
            let info = qi_closure(&raw, &plant, 1e-9);
            let report = qi_test_general(&info, &plant, DeltaMode::Numeric, 1e-9).unwrap();
            assert!(report.quadratically_invariant, "criterion 5: FAIL — closure not QI");
            let big_s = info.big_s();
            for _ in 0..20 {
                let l = DMatrix::from_fn(big_s.nrows(), big_s.ncols(), |i, j| {
                    if big_s.get(i, j) { r.random_range(-0.8..0.8) } else { 0.0 }
                });
                let g = DVector::from_fn(m * (n_steps + 1), |i, _| {
                    if i < m * n_steps { r.random_range(-1.0..1.0) } else { 0.0 }
                });
                let ctrl = OutputFeedbackController::new(l, g, n_steps, m, p).unwrap();
                let policy = l_to_q(&ctrl, &lifted, &x0).unwrap();
                let tol = membership_tol(policy.q());
                assert!(
                    policy.lies_in(&big_s, tol).unwrap(),
                    "criterion 5: FAIL — structured L mapped outside the pattern on a QI instance"
                );
                transfers += 1;
            }
        } else {
            // Non-QI instance: the targeted witness sum is structured but
            // its disturbance-feedback image is not.
            let report = qi_test_general(&raw, &plant, DeltaMode::Numeric, 1e-9).unwrap();
            let Some(condition) = report.failing().next() else { continue };
            let ConditionIndices::General { k, j, h, g } = condition.indices else {
                unreachable!()
            };
            let witness = targeted_witness(
                &raw, &plant, k, j, h, g, condition.violations[0], 600 + trial, 1e-9,
            )
            .unwrap();
            let big_s = raw.big_s();
            let l = &witness.l + &witness.l_prime;
            assert!(
                big_s.member(&l, 0.0).unwrap(),
                "criterion 5: FAIL — witness sum left the pattern"
            );
            let ctrl = OutputFeedbackController::new(
                l,
                DVector::zeros(m * (n_steps + 1)),
                n_steps,
                m,
                p,
            )
            .unwrap();
            let policy = l_to_q(&ctrl, &lifted, &x0).unwrap();
            let tol = membership_tol(policy.q());
            assert!(
                !policy.lies_in(&big_s, tol).unwrap(),
                "criterion 5: FAIL — expected an escape on a non-QI instance (trial {trial})"
            );
            escapes += 1;
        }
    }

    assert!(
        transfers >= 100 && escapes >= 5,
        "criterion 5: FAIL — coverage too thin ({transfers} transfers / {escapes} escapes)"
    );
    pass(
        5,
        format!("{transfers} structured maps stayed in-pattern on QI instances; {escapes} non-QI instances escaped"),
    );
}

#[test]
fn criterion_6_robust_feasibility_end_to_end() {
    let started = Instant::now();
    let inst = ProblemFile::load(&fixture("synth_box.json"))
        .and_then(|f| f.build())
        .expect("criterion 6: FAIL — fixture does not load");
    let spec = inst.constraints.as_ref().unwrap();
    let cost = inst.cost.as_ref().unwrap();
    let lifted = LiftedSystem::build(&inst.plant, inst.n_steps);
    let assembled = assemble(
        &lifted,
        &inst.info,
        spec,
        cost,
        &inst.x0,
        AssembleOptions::default(),
    )
    .unwrap();
    assert!(
        !assembled.conservative_restriction,
        "criterion 6: FAIL — dense structure flagged conservative"
    );
    let settings = SolverSettings { eps_abs: 1e-8, eps_rel: 1e-8, ..SolverSettings::default() };
    let solution = solve(&assembled.qp, &settings);
    assert_eq!(
        solution.status,
        SolveStatus::Optimal,
        "criterion 6: FAIL — solver returned {}",
        solution.status
    );
    let (policy, objective) = extract(&solution, &assembled).unwrap();
    let ctrl = q_to_l(&policy, &lifted, &inst.x0).unwrap();
    let report = verify_robust(
        &inst.plant,
        &ctrl,
        spec,
        &inst.x0,
        VerifyMethod::Vertices { cap: 1 << 12 },
    )
    .unwrap();
    let elapsed = started.elapsed();
    assert!(
        report.worst_slack >= -1e-6,
        "criterion 6: FAIL — worst slack {} at a vertex",
        report.worst_slack
    );
    assert!(
        elapsed.as_secs_f64() < 10.0,
        "criterion 6: FAIL — took {elapsed:?}, budget 10 s"
    );
    pass(
        6,
        format!(
            "objective {objective:.6}, worst slack {:.3e} over {} vertex sequences in {elapsed:?}",
            report.worst_slack, report.evaluated
        ),
    );
}

#[test]
fn criterion_7_centralized_sanity() {
    // Two instances: one with slack limits (constraints inactive) and one
    // with input limits that genuinely bind.
    let plant = Plant::new(
        DMatrix::from_row_slice(2, 2, &[0.9, 0.2, -0.1, 0.8]),
        DMatrix::identity(2, 2),
        DMatrix::identity(2, 2),
        DMatrix::identity(2, 2),
        DMatrix::zeros(2, 2),
    )
    .unwrap();
    let n_steps = 4;
    let x0 = DVector::from_column_slice(&[1.0, -1.0]);
    let cost = CostSpec::uniform(
        DMatrix::identity(2, 2),
        DMatrix::identity(2, 2).scale(0.1),
        n_steps,
    )
    .unwrap();
    let info = InformationStructure::constant(&BinaryMatrix::ones(2, 2), n_steps);
    let lifted = LiftedSystem::build(&plant, n_steps);

    // Independent batch response, built by direct simulation.
    let (free, forced) = batch_response(&plant, n_steps);
    let nv = 2 * n_steps;
    let mut q_bar = DMatrix::<f64>::zeros(2 * (n_steps + 1), 2 * (n_steps + 1));
    for k in 0..=n_steps {
        q_bar.view_mut((2 * k, 2 * k), (2, 2)).copy_from(&DMatrix::identity(2, 2));
    }
    let mut r_bar = DMatrix::<f64>::zeros(nv, nv);
    for k in 0..n_steps {
        r_bar
            .view_mut((2 * k, 2 * k), (2, 2))
            .copy_from(&DMatrix::identity(2, 2).scale(0.1));
    }
    let x_free = &free * &x0;
    let h_or = 2.0 * (forced.transpose() * &q_bar * &forced + &r_bar);
    let f_or = 2.0 * forced.transpose() * &q_bar * &x_free;
    let const_or = (x_free.transpose() * &q_bar * &x_free)[0];

    for (label, u_lim) in [("slack", 2.0), ("binding", 0.15)] {
        let spec = box_constraints(2, 2, 5.0, u_lim, 0.0);
        let assembled =
            assemble(&lifted, &info, &spec, &cost, &x0, AssembleOptions::default()).unwrap();
        let settings =
            SolverSettings { eps_abs: 1e-9, eps_rel: 1e-9, ..SolverSettings::default() };
        let solution = solve(&assembled.qp, &settings);
        assert_eq!(
            solution.status,
            SolveStatus::Optimal,
            "criterion 7: FAIL — synthesis not optimal ({label})"
        );
        let (_, objective) = extract(&solution, &assembled).unwrap();

        // Oracle: constrained batch least squares on the same instance.
        // Stage rows k = 0..N-1 constrain x_k and u_k; the terminal row
        // constrains x_N. Zero input is feasible (the free response stays
        // far inside the state box).
        let n_rows = spec.u.nrows();
        let mut g_in = DMatrix::<f64>::zeros(n_rows * n_steps + spec.r.nrows(), nv);
        let mut h_in = DVector::<f64>::zeros(n_rows * n_steps + spec.r.nrows());
        for k in 0..n_steps {
            let state_rows = &spec.u * forced.rows(2 * k, 2);
            for i in 0..n_rows {
                for c in 0..nv {
                    g_in[(k * n_rows + i, c)] = state_rows[(i, c)];
                }
                for c in 0..2 {
                    g_in[(k * n_rows + i, 2 * k + c)] += spec.v[(i, c)];
                }
                h_in[k * n_rows + i] = spec.b[i] - (spec.u.row(i) * x_free.rows(2 * k, 2))[0];
            }
        }
        let term = &spec.r * forced.rows(2 * n_steps, 2);
        for i in 0..spec.r.nrows() {
            for c in 0..nv {
                g_in[(n_rows * n_steps + i, c)] = term[(i, c)];
            }
            h_in[n_rows * n_steps + i] =
                spec.z[i] - (spec.r.row(i) * x_free.rows(2 * n_steps, 2))[0];
        }
        let oracle = active_set_qp(
            &h_or,
            &f_or,
            &DMatrix::zeros(0, nv),
            &DVector::zeros(0),
            &g_in,
            &h_in,
            &DVector::zeros(nv),
        );
        let oracle_cost = oracle.objective + const_or;
        let rel = (objective - oracle_cost).abs() / oracle_cost.abs().max(1.0);
        assert!(
            rel <= 1e-5,
            "criterion 7: FAIL — {label}: synthesized {objective} vs oracle {oracle_cost} (rel {rel:.3e})"
        );
        if label == "binding" {
            // The tight instance must actually differ from the
            // unconstrained optimum, or it tests nothing.
            let unconstrained = -0.5 * (f_or.transpose() * h_or.clone().lu().solve(&f_or).unwrap())[0]
                + const_or;
            assert!(
                oracle_cost > unconstrained + 1e-6,
                "criterion 7: FAIL — binding instance did not bind"
            );
        }
    }

    pass(7, "nominal costs match the batch least-squares oracle to rel 1e-5 \
             (slack and binding constraint sets)".to_string());
}

#[test]
fn criterion_8_qp_solver_correctness() {
    let mut r = rng(0x8888);
    let mut solved = 0_usize;
    let mut worst_x = 0.0_f64;
    let mut worst_kkt = 0.0_f64;

    while solved < 100 {
        let nv = r.random_range(2..=30);
        let ni = r.random_range(1..=2 * nv);
        let ne = r.random_range(0..=nv / 4);

        // Strictly convex objective and constraints feasible at a known
        // interior point.
        let m = random_matrix(&mut r, nv, nv, 1.0);
        let p = m.transpose() * &m + DMatrix::identity(nv, nv).scale(r.random_range(0.1..1.0));
        let q = DVector::from_fn(nv, |_, _| r.random_range(-1.0..1.0));
        let x_f = DVector::from_fn(nv, |_, _| r.random_range(-1.0..1.0));
        let g_in = random_matrix(&mut r, ni, nv, 1.0);
        let margin = DVector::from_fn(ni, |_, _| r.random_range(0.01..1.0));
        let h_in = &g_in * &x_f + margin;
        let a_eq = random_matrix(&mut r, ne, nv, 1.0);
        let b_eq = &a_eq * &x_f;

        let problem = QpProblem::new(
            p.clone(),
            q.clone(),
            a_eq.clone(),
            b_eq.clone(),
            g_in.clone(),
            h_in.clone(),
        )
        .unwrap();
        let settings = SolverSettings {
            eps_abs: 1e-9,
            eps_rel: 1e-9,
            max_iters: 200_000,
            ..SolverSettings::default()
        };
        let solution = solve(&problem, &settings);
        assert_eq!(
            solution.status,
            SolveStatus::Optimal,
            "criterion 8: FAIL — solver returned {} on instance {solved}",
            solution.status
        );

        let oracle = active_set_qp(&p, &q, &a_eq, &b_eq, &g_in, &h_in, &x_f);
        let dx = (&solution.x - &oracle.x).amax() / (1.0 + oracle.x.amax());
        assert!(
            dx <= 1e-5,
            "criterion 8: FAIL — solution off by {dx:.3e} on instance {solved} (nv={nv}, ni={ni}, ne={ne})"
        );
        let kkt = solution.residuals.primal.max(solution.residuals.dual);
        assert!(
            kkt <= 1e-6,
            "criterion 8: FAIL — KKT residual {kkt:.3e} on instance {solved}"
        );
        worst_x = worst_x.max(dx);
        worst_kkt = worst_kkt.max(kkt);
        solved += 1;
    }

    pass(
        8,
        format!(
            "100 random QPs: worst solution error {worst_x:.3e}, worst KKT residual {worst_kkt:.3e}"
        ),
    );
}

/// Beyond the numbered criteria: a one-dimensional robust synthesis checked
/// against literal worst-case enumeration, exercising the dualization in a
/// setting small enough to verify by hand.
#[test]
fn one_dimensional_robust_synthesis_matches_the_exhaustive_oracle() {
    let plant = Plant::new(
        DMatrix::from_element(1, 1, 1.0),
        DMatrix::from_element(1, 1, 1.0),
        DMatrix::from_element(1, 1, 1.0),
        DMatrix::from_element(1, 1, 1.0),
        DMatrix::zeros(1, 1),
    )
    .unwrap();
    let n_steps = 2;
    let x0 = DVector::from_element(1, 0.8);
    let spec = box_constraints(1, 1, 1.0, 1.0, 0.1);
    let cost = CostSpec::uniform(
        DMatrix::identity(1, 1),
        DMatrix::identity(1, 1),
        n_steps,
    )
    .unwrap();
    let info = InformationStructure::constant(&BinaryMatrix::ones(1, 1), n_steps);
    let lifted = LiftedSystem::build(&plant, n_steps);
    let assembled =
        assemble(&lifted, &info, &spec, &cost, &x0, AssembleOptions::default()).unwrap();
    let settings = SolverSettings { eps_abs: 1e-9, eps_rel: 1e-9, ..SolverSettings::default() };
    let solution = solve(&assembled.qp, &settings);
    assert_eq!(solution.status, SolveStatus::Optimal);
    let (policy, _) = extract(&solution, &assembled).unwrap();
    let ctrl = q_to_l(&policy, &lifted, &x0).unwrap();

    // Every vertex sequence of W^N, rolled out literally.
    let report = verify_robust(
        &plant,
        &ctrl,
        &spec,
        &x0,
        VerifyMethod::Vertices { cap: 64 },
    )
    .unwrap();
    assert!(report.worst_slack >= -1e-4, "robust margin {}", report.worst_slack);

    // The full policy class here is u0 = v0, u1 = q·w0 + v1 (w0 is the only
    // disturbance visible before the last input). A policy is admissible
    // when every vertex of W² keeps states and inputs in their boxes; the
    // reported optimum minimizes the nominal (w = 0) cost among admissible
    // policies, so no admissible grid point may beat it.
    let robustly_feasible = |q: f64, v0: f64, v1: f64| -> bool {
        for w0 in [-0.1, 0.1] {
            for w1 in [-0.1, 0.1] {
                let u0 = v0;
                let x1 = x0[0] + u0 + w0;
                let u1 = q * w0 + v1;
                let x2 = x1 + u1 + w1;
                if x1.abs() > 1.0 + 1e-9
                    || x2.abs() > 1.0 + 1e-9
                    || u0.abs() > 1.0 + 1e-9
                    || u1.abs() > 1.0 + 1e-9
                {
                    return false;
                }
            }
        }
        true
    };
    let nominal_cost = |v0: f64, v1: f64| -> f64 {
        let x1 = x0[0] + v0;
        let x2 = x1 + v1;
        x0[0] * x0[0] + x1 * x1 + x2 * x2 + v0 * v0 + v1 * v1
    };
    // Effective disturbance gain of the synthesized policy: u = Q·P·w + v.
    let gain = policy.q() * &lifted.p_mat;
    let q_eff = gain[(1, 0)];
    let (v0, v1) = (policy.v()[0], policy.v()[1]);
    assert!(
        robustly_feasible(q_eff, v0, v1),
        "synthesized policy violates a vertex"
    );
    let synth_nominal = nominal_cost(v0, v1);
    let mut best = f64::INFINITY;
    let grid: Vec<f64> = (-20..=20).map(|i| i as f64 * 0.05).collect();
    for &q in &grid {
        for &a in &grid {
            for &b in &grid {
                if robustly_feasible(q, a, b) {
                    best = best.min(nominal_cost(a, b));
                }
            }
        }
    }
    assert!(
        synth_nominal <= best + 1e-6,
        "an admissible grid policy beats the optimum: {best} vs {synth_nominal}"
    );
    assert!(
        best <= synth_nominal + 0.05,
        "the grid should come close to the optimum: {best} vs {synth_nominal}"
    );
}

/// The objective reported by synthesis is the nominal cost of the policy it
/// returns: re-rolling the policy at w = 0 and scoring it must agree.
#[test]
fn synthesis_objective_equals_the_nominal_rollout_cost() {
    let inst = ProblemFile::load(&fixture("synth_box.json"))
        .and_then(|f| f.build())
        .unwrap();
    let spec = inst.constraints.as_ref().unwrap();
    let cost = inst.cost.as_ref().unwrap();
    let lifted = LiftedSystem::build(&inst.plant, inst.n_steps);
    let assembled =
        assemble(&lifted, &inst.info, spec, cost, &inst.x0, AssembleOptions::default()).unwrap();
    let solution = solve(
        &assembled.qp,
        &SolverSettings { eps_abs: 1e-9, eps_rel: 1e-9, ..SolverSettings::default() },
    );
    let (policy, objective) = extract(&solution, &assembled).unwrap();
    let w = vec![DVector::zeros(inst.plant.num_states()); inst.n_steps];
    let traj =
        rollout_disturbance_feedback(&inst.plant, &policy, &lifted, &inst.x0, &w, Some(cost))
            .unwrap();
    let rolled = traj.nominal_cost.unwrap();
    assert!(
        (rolled - objective).abs() <= 1e-6 * objective.abs().max(1.0),
        "objective {objective} vs rolled nominal cost {rolled}"
    );
}

/// Guard for the generators themselves: closures really are supersets and
/// really are QI.
#[test]
fn closure_helper_produces_qi_supersets() {
    let mut r = rng(0x1010);
    for _ in 0..10 {
        let n = r.random_range(1..=3);
        let m = r.random_range(1..=3);
        let p = r.random_range(1..=3);
        let n_steps = r.random_range(2..=4);
        let plant = random_plant(&mut r, n, m, p);
        let raw = random_structure(&mut r, n_steps, m, p, 0.4);
        let closed = qi_closure(&raw, &plant, 1e-9);
        for k in 0..n_steps {
            for j in 0..=k {
                let before = raw.block(k, j);
                let after = closed.block(k, j);
                assert!(before.leq(after).unwrap().holds, "closure lost entries");
            }
        }
        let report = qi_test_general(&closed, &plant, DeltaMode::Numeric, 1e-9).unwrap();
        assert!(report.quadratically_invariant);
    }
    // Also pin a non-random case: the all-ones structure is already closed.
    let plant = random_plant(&mut r, 2, 2, 2);
    let dense = InformationStructure::constant(&BinaryMatrix::ones(2, 2), 3);
    let closed = qi_closure(&dense, &plant, 1e-9);
    let mut blocks = BTreeMap::new();
    for k in 0..3 {
        for j in 0..=k {
            blocks.insert((k, j), closed.block(k, j).clone());
        }
    }
    assert!(blocks.values().all(|b| (0..2).all(|i| (0..2).all(|j| b.get(i, j)))));
}
