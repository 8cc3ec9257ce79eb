//! Closed-loop rollouts and robust-constraint verification.
//!
//! Both controller parametrizations are simulated by the literal recursion
//! `x_{k+1} = A x_k + B u_k + D w_k`, `y_k = C x_k + H w_k`, so the lifted
//! algebra is cross-checked against the dynamics it encodes rather than
//! against itself. [`verify_robust`] then measures the worst constraint
//! slack of a closed loop over the disturbance set — exhaustively at the
//! polytope's vertices (where an affine loop attains its worst case) or by
//! uniform sampling.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lifted::{stacked_constraints, ConstraintSpec, LiftedSystem, Plant};
use crate::policy::{DisturbanceFeedbackPolicy, OutputFeedbackController};
use crate::polytope::Sampler;
use crate::robust::CostSpec;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One closed-loop run: `N + 1` states and outputs, `N` inputs and
/// disturbances, and optionally the disturbance-free cost of the same
/// controller (which does not depend on the disturbances actually drawn).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<Vec<f64>>,
    pub inputs: Vec<Vec<f64>>,
    pub outputs: Vec<Vec<f64>>,
    pub disturbances: Vec<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nominal_cost: Option<f64>,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.inputs.len()
    }

    fn stack(seq: &[Vec<f64>]) -> DVector<f64> {
        DVector::from_iterator(
            seq.iter().map(Vec::len).sum(),
            seq.iter().flatten().copied(),
        )
    }

    /// All states as one `(N+1) n` vector, matching the lifted ordering.
    pub fn stacked_states(&self) -> DVector<f64> {
        Self::stack(&self.states)
    }

    /// Inputs padded with the zero terminal block, as the lifted maps use.
    pub fn stacked_inputs(&self) -> DVector<f64> {
        let m = self.inputs.first().map_or(0, Vec::len);
        let mut out = self.inputs.clone();
        out.push(vec![0.0; m]);
        Self::stack(&out)
    }
}

fn check_disturbances(plant: &Plant, n_steps: usize, w: &[DVector<f64>]) -> Result<()> {
    if w.len() != n_steps {
        return Err(Error::dims(
            "rollout",
            format!("{n_steps} stage disturbances"),
            format!("{}", w.len()),
        ));
    }
    for (k, wk) in w.iter().enumerate() {
        if wk.len() != plant.num_states() {
            return Err(Error::dims(
                "rollout",
                format!("disturbances in R^{}", plant.num_states()),
                format!("length {} at stage {k}", wk.len()),
            ));
        }
    }
    Ok(())
}

fn check_x0(plant: &Plant, x0: &DVector<f64>) -> Result<()> {
    if x0.len() != plant.num_states() {
        return Err(Error::dims(
            "rollout",
            format!("x0 in R^{}", plant.num_states()),
            format!("length {}", x0.len()),
        ));
    }
    Ok(())
}

fn quadratic_cost(cost: &CostSpec, states: &[DVector<f64>], inputs: &[DVector<f64>]) -> f64 {
    let mut j = 0.0;
    for (x, w) in states.iter().zip(cost.state_weights()) {
        j += (x.transpose() * w * x)[(0, 0)];
    }
    for (u, w) in inputs.iter().zip(cost.input_weights()) {
        j += (u.transpose() * w * u)[(0, 0)];
    }
    j
}

fn to_rows(seq: Vec<DVector<f64>>) -> Vec<Vec<f64>> {
    seq.into_iter().map(|v| v.iter().copied().collect()).collect()
}

/// Runs `u_k = sum_{j<=k} L_{k,j} y_j + g_k` against the plant recursion.
/// When `cost` is given, the trajectory also carries the controller's
/// disturbance-free cost.
pub fn rollout_output_feedback(
    plant: &Plant,
    ctrl: &OutputFeedbackController,
    x0: &DVector<f64>,
    w: &[DVector<f64>],
    cost: Option<&CostSpec>,
) -> Result<Trajectory> {
    let n_steps = ctrl.horizon();
    if ctrl.num_inputs() != plant.num_inputs() || ctrl.num_outputs() != plant.num_outputs() {
        return Err(Error::dims(
            "rollout_output_feedback",
            format!("{}x{} gain blocks", plant.num_inputs(), plant.num_outputs()),
            format!("{}x{}", ctrl.num_inputs(), ctrl.num_outputs()),
        ));
    }
    check_x0(plant, x0)?;
    check_disturbances(plant, n_steps, w)?;
    if let Some(c) = cost {
        if c.horizon() != n_steps {
            return Err(Error::dims(
                "rollout_output_feedback",
                format!("cost over horizon {n_steps}"),
                format!("{}", c.horizon()),
            ));
        }
    }

    let run = |w: &[DVector<f64>]| -> (Vec<DVector<f64>>, Vec<DVector<f64>>, Vec<DVector<f64>>) {
        let zero_w = DVector::zeros(plant.num_states());
        let mut states = vec![x0.clone()];
        let mut outputs: Vec<DVector<f64>> = Vec::new();
        let mut inputs = Vec::new();
        for k in 0..n_steps {
            let wk = w.get(k).unwrap_or(&zero_w);
            outputs.push(&plant.c * &states[k] + &plant.h * wk);
            let mut uk = ctrl.g().rows(k * ctrl.num_inputs(), ctrl.num_inputs()).clone_owned();
            for (j, yj) in outputs.iter().enumerate() {
                uk += ctrl.block(k, j) * yj;
            }
            states.push(&plant.a * &states[k] + &plant.b * &uk + &plant.d * wk);
            inputs.push(uk);
        }
        outputs.push(&plant.c * &states[n_steps]);
        (states, inputs, outputs)
    };

    let nominal_cost = cost.map(|c| {
        let (states, inputs, _) = run(&[]);
        quadratic_cost(c, &states, &inputs)
    });
    let (states, inputs, outputs) = run(w);
    Ok(Trajectory {
        states: to_rows(states),
        inputs: to_rows(inputs),
        outputs: to_rows(outputs),
        disturbances: to_rows(w.to_vec()),
        nominal_cost,
    })
}

/// Computes the stacked input `u = Q (P w) + v`, then runs the same plant
/// recursion open-loop on it.
pub fn rollout_disturbance_feedback(
    plant: &Plant,
    policy: &DisturbanceFeedbackPolicy,
    lifted: &LiftedSystem,
    x0: &DVector<f64>,
    w: &[DVector<f64>],
    cost: Option<&CostSpec>,
) -> Result<Trajectory> {
    let n_steps = policy.horizon();
    if lifted.horizon() != n_steps
        || lifted.num_inputs() != policy.num_inputs()
        || lifted.num_outputs() != policy.num_outputs()
    {
        return Err(Error::dims(
            "rollout_disturbance_feedback",
            format!("lifted system over horizon {n_steps}"),
            format!("horizon {}", lifted.horizon()),
        ));
    }
    check_x0(plant, x0)?;
    check_disturbances(plant, n_steps, w)?;
    if let Some(c) = cost {
        if c.horizon() != n_steps {
            return Err(Error::dims(
                "rollout_disturbance_feedback",
                format!("cost over horizon {n_steps}"),
                format!("{}", c.horizon()),
            ));
        }
    }

    let n = plant.num_states();
    let m = plant.num_inputs();
    let run = |w: &[DVector<f64>]| -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
        let mut w_st = DVector::<f64>::zeros(n * (n_steps + 1));
        for (k, wk) in w.iter().enumerate() {
            w_st.rows_mut(k * n, n).copy_from(wk);
        }
        let u_st = policy.q() * (&lifted.p_mat * &w_st) + policy.v();
        let zero_w = DVector::zeros(n);
        let mut states = vec![x0.clone()];
        let mut inputs = Vec::new();
        for k in 0..n_steps {
            let wk = w.get(k).unwrap_or(&zero_w);
            let uk = u_st.rows(k * m, m).clone_owned();
            states.push(&plant.a * &states[k] + &plant.b * &uk + &plant.d * wk);
            inputs.push(uk);
        }
        (states, inputs)
    };

    let nominal_cost = cost.map(|c| {
        let (states, inputs) = run(&[]);
        quadratic_cost(c, &states, &inputs)
    });
    let (states, inputs) = run(w);
    let zero_w = DVector::zeros(n);
    let outputs: Vec<DVector<f64>> = (0..=n_steps)
        .map(|k| &plant.c * &states[k] + &plant.h * w.get(k).unwrap_or(&zero_w))
        .collect();
    Ok(Trajectory {
        states: to_rows(states),
        inputs: to_rows(inputs),
        outputs: to_rows(outputs),
        disturbances: to_rows(w.to_vec()),
        nominal_cost,
    })
}

/// How [`verify_robust`] explores the disturbance set.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VerifyMethod {
    /// Enumerate every stacked combination of stage-polytope vertices,
    /// erroring out if there would be more than `cap` of them.
    Vertices { cap: usize },
    /// Draw `count` uniform stacked disturbances.
    Sample { count: usize, seed: u64 },
}

impl Default for VerifyMethod {
    fn default() -> Self {
        VerifyMethod::Vertices { cap: 1 << 12 }
    }
}

/// Outcome of a robustness check.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RobustReport {
    /// Smallest `c - lhs` over all evaluated disturbances and constraint
    /// rows; negative means a violation was found.
    pub worst_slack: f64,
    /// A disturbance sequence attaining a violation, if one was found.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub violating_w: Option<Vec<Vec<f64>>>,
    pub method: String,
    /// Number of stacked disturbances evaluated.
    pub evaluated: usize,
}

/// Measures the worst stage/terminal constraint slack of the closed loop
/// `(plant, ctrl)` from `x0` over the disturbance polytope of `spec`.
pub fn verify_robust(
    plant: &Plant,
    ctrl: &OutputFeedbackController,
    spec: &ConstraintSpec,
    x0: &DVector<f64>,
    method: VerifyMethod,
) -> Result<RobustReport> {
    let n_steps = ctrl.horizon();
    let (n, m) = (plant.num_states(), plant.num_inputs());
    check_x0(plant, x0)?;
    let lifted = LiftedSystem::build(plant, n_steps);
    let (big_u, big_v, rhs) = stacked_constraints(spec, n, m, n_steps);

    // The closed loop is affine in the stacked disturbance:
    //   u = (I - L CB)^{-1} (L (boldCA x0 + P w) + g),
    //   x = boldA x0 + boldB u + boldE_D w,
    // so each constraint row is an affine functional of w.
    let t = DMatrix::<f64>::identity(m * (n_steps + 1), m * (n_steps + 1))
        - ctrl.l() * &lifted.cb;
    let lu = t.lu();
    let ca_x0 = &lifted.big_c * (&lifted.big_a * x0);
    let u_aff = lu
        .solve(&(ctrl.l() * &ca_x0 + ctrl.g()))
        .ok_or(Error::SingularClosedLoop)?;
    let u_lin = lu
        .solve(&(ctrl.l() * &lifted.p_mat))
        .ok_or(Error::SingularClosedLoop)?;
    let row_lin = &big_u * (&lifted.big_b * &u_lin + &lifted.big_ed) + &big_v * &u_lin;
    let row_aff = &big_u * (&lifted.big_a * x0 + &lifted.big_b * &u_aff) + &big_v * &u_aff - &rhs;

    let mut worst = f64::INFINITY;
    let mut witness: Option<Vec<Vec<f64>>> = None;
    let mut evaluated = 0usize;
    let mut consider = |w_stages: &[DVector<f64>]| {
        evaluated += 1;
        let mut w_st = DVector::<f64>::zeros(n * (n_steps + 1));
        for (k, wk) in w_stages.iter().enumerate() {
            w_st.rows_mut(k * n, n).copy_from(wk);
        }
        let lhs = &row_lin * &w_st + &row_aff;
        let slack = -lhs.max();
        if slack < worst {
            worst = slack;
            if slack < 0.0 {
                witness = Some(w_stages.iter().map(|v| v.iter().copied().collect()).collect());
            }
        }
    };

    let method_name;
    match method {
        VerifyMethod::Vertices { cap } => {
            method_name = "vertices";
            let verts = spec.w_set().vertices()?;
            let combos = (verts.len() as f64).powi(n_steps as i32);
            if verts.is_empty() {
                return Err(Error::EmptyPolytope);
            }
            if combos > cap as f64 {
                return Err(Error::VertexBudget {
                    rows: verts.len(),
                    dim: n_steps,
                });
            }
            // Odometer over vertex indices, lexicographic for determinism.
            let mut idx = vec![0usize; n_steps];
            loop {
                let stages: Vec<DVector<f64>> =
                    idx.iter().map(|&i| verts[i].clone()).collect();
                consider(&stages);
                let mut pos = n_steps;
                loop {
                    if pos == 0 {
                        break;
                    }
                    pos -= 1;
                    idx[pos] += 1;
                    if idx[pos] < verts.len() {
                        break;
                    }
                    idx[pos] = 0;
                }
                if idx.iter().all(|&i| i == 0) {
                    break;
                }
            }
        }
        VerifyMethod::Sample { count, seed } => {
            method_name = "sample";
            let mut sampler = Sampler::new(&spec.w_set().clone())?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..count {
                let stages: Vec<DVector<f64>> =
                    (0..n_steps).map(|_| sampler.draw(&mut rng)).collect();
                consider(&stages);
            }
        }
    }
    drop(consider);
    Ok(RobustReport {
        worst_slack: worst,
        violating_w: witness,
        method: method_name.to_string(),
        evaluated,
    })
}
