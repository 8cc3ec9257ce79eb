//! The `dcs` command line: certification, synthesis, simulation, and
//! condition explanation over one JSON problem-file format.
//!
//! Exit codes are stable: `0` success (and, for `qi-check`, a QI verdict),
//! `2` structure is not quadratically invariant (or synthesis refused
//! without `--force-restrict`), `3` synthesis infeasible, `1` any other
//! error. Reports are deterministic for identical inputs and seeds;
//! `--no-timestamp` removes the only non-reproducible field.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DVector;
use serde_json::json;

use crate::error::{Error, Result};
use crate::infostruct::{CommTopology, InfoStructSpec};
use crate::lifted::{DeltaMode, LiftedSystem};
use crate::policy::{q_to_l, OutputFeedbackController};
use crate::problem::{ProblemFile, ProblemInstance};
use crate::qi::{enumerate_conditions, qi_test_comm, qi_test_general, qi_test_sensing, QiReport};
use crate::qpsolve::{solve, SolveStatus, SolverSettings};
use crate::robust::{assemble, export_sparse_json, extract, AssembleOptions};
use crate::sim::{rollout_output_feedback, verify_robust, VerifyMethod};

#[derive(Parser)]
#[command(
    name = "dcs",
    version,
    about = "Structured controller certification and robust synthesis over finite horizons"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Decide quadratic invariance of the problem's information structure.
    QiCheck(QiCheckArgs),
    /// List every invariance condition with its signaling interpretation.
    Explain(ExplainArgs),
    /// Synthesize the optimal structured disturbance-feedback policy.
    Synthesize(SynthesizeArgs),
    /// Roll out a controller and verify its constraints over the
    /// disturbance set.
    Simulate(SimulateArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DeltaModeArg {
    /// Patterns read off the actual plant response coefficients.
    Numeric,
    /// Worst-case patterns from boolean products of the plant's sparsity.
    Structural,
}

impl From<DeltaModeArg> for DeltaMode {
    fn from(arg: DeltaModeArg) -> Self {
        match arg {
            DeltaModeArg::Numeric => DeltaMode::Numeric,
            DeltaModeArg::Structural => DeltaMode::Structural,
        }
    }
}

#[derive(Args)]
struct CommonArgs {
    /// Problem file (JSON).
    file: PathBuf,
    /// Zero threshold when reading sparsity patterns off real matrices
    /// (overrides the problem file's `options.tol`).
    #[arg(long, env = "DCS_TOL")]
    tol: Option<f64>,
    /// How interaction patterns are derived from the plant (overrides the
    /// problem file's `options.delta_mode`).
    #[arg(long, env = "DCS_DELTA_MODE", value_enum)]
    delta_mode: Option<DeltaModeArg>,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Omit the generation timestamp for byte-reproducible reports.
    #[arg(long)]
    no_timestamp: bool,
}

impl CommonArgs {
    fn load(&self) -> Result<ProblemInstance> {
        let mut inst = ProblemFile::load(&self.file)?.build()?;
        if let Some(tol) = self.tol {
            inst.tol = tol;
        }
        if let Some(mode) = self.delta_mode {
            inst.delta_mode = mode.into();
        }
        Ok(inst)
    }

    fn emit(&self, mut report: serde_json::Value) -> Result<()> {
        if !self.no_timestamp {
            let now = SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0);
            report["generated_at_unix"] = json!(now);
        }
        let text = format!("{}\n", serde_json::to_string_pretty(&report)?);
        match &self.out {
            Some(path) => std::fs::write(path, text)?,
            None => print!("{text}"),
        }
        Ok(())
    }
}

#[derive(Args)]
struct QiCheckArgs {
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args)]
struct ExplainArgs {
    /// Problem file (JSON).
    file: PathBuf,
}

#[derive(Args)]
struct SynthesizeArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Absolute KKT tolerance for the QP solver.
    #[arg(long, env = "DCS_EPS_ABS", default_value_t = 1e-6)]
    eps_abs: f64,
    /// Relative KKT tolerance for the QP solver.
    #[arg(long, env = "DCS_EPS_REL", default_value_t = 1e-6)]
    eps_rel: f64,
    /// Iteration cap for the QP solver.
    #[arg(long, env = "DCS_MAX_ITERS", default_value_t = 20_000)]
    max_iters: usize,
    /// Tiny diagonal penalty on the gain entries, for a reproducible
    /// (otherwise non-unique) optimal Q.
    #[arg(long, value_name = "WEIGHT")]
    tikhonov_q: Option<f64>,
    /// Proceed on a non-QI structure, accepting that the restricted policy
    /// is a conservative inner approximation rather than the true optimum.
    #[arg(long)]
    force_restrict: bool,
    /// Also write the assembled QP as sparse triplets for external checks.
    #[arg(long, value_name = "PATH")]
    export_qp: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Controller file: either bare controller JSON or a `synthesize`
    /// report (its `controller` field is used).
    controller: PathBuf,
    /// Check every combination of disturbance-polytope vertices.
    #[arg(long, group = "method")]
    vertices: bool,
    /// Check K uniformly sampled disturbance sequences.
    #[arg(long, group = "method", value_name = "K")]
    samples: Option<usize>,
    /// RNG seed for `--samples`.
    #[arg(long, env = "DCS_SEED", default_value_t = 0)]
    seed: u64,
    /// Budget for `--vertices`: maximum number of stacked combinations.
    #[arg(long, default_value_t = 1 << 12)]
    vertex_cap: usize,
}

/// Entry point used by the binary; returns the process exit code.
pub fn main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap's own exit code (2) is reserved here for "not QI".
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn run(cli: Cli) -> Result<i32> {
    match cli.cmd {
        Cmd::QiCheck(args) => cmd_qi_check(args),
        Cmd::Explain(args) => cmd_explain(args),
        Cmd::Synthesize(args) => cmd_synthesize(args),
        Cmd::Simulate(args) => cmd_simulate(args),
    }
}

/// Runs the cheapest test that is exact for the structure at hand: the
/// sensing shortcut needs `N >= n + 1` to be necessary as well as
/// sufficient, the propagation test is exact at every horizon, and custom
/// or delay structures get the general condition set.
fn dispatch_qi(inst: &ProblemInstance) -> Result<QiReport> {
    let mode = inst.delta_mode;
    let n = inst.plant.num_states();
    match &inst.info_spec {
        InfoStructSpec::Constant { s, .. } if inst.n_steps >= n + 1 => {
            qi_test_sensing(s, &inst.plant, inst.n_steps, mode, inst.tol)
        }
        InfoStructSpec::Comm { s, z, .. } => {
            let z = CommTopology::new(z.clone())?;
            qi_test_comm(s, &z, &inst.plant, inst.n_steps, mode, inst.tol)
        }
        _ => qi_test_general(&inst.info, &inst.plant, mode, inst.tol),
    }
}

fn cmd_qi_check(args: QiCheckArgs) -> Result<i32> {
    let inst = args.common.load()?;
    let report = dispatch_qi(&inst)?;
    let qi = report.quadratically_invariant;
    args.common.emit(serde_json::to_value(&report)?)?;
    Ok(if qi { 0 } else { 2 })
}

fn cmd_explain(args: ExplainArgs) -> Result<i32> {
    let inst = ProblemFile::load(&args.file)?.build()?;
    let conditions = enumerate_conditions(inst.n_steps);
    if conditions.is_empty() {
        println!("no conditions: a one-step horizon leaves nothing to signal about");
        return Ok(0);
    }
    for (k, j, h, g) in &conditions {
        let actor = h - g - 1;
        println!(
            "(k={k}, j={j}, h={h}, g={g}): input {k} reads y_{h}, which carries input {actor}'s \
             action after {g} step(s); input {actor} read y_{j}, so input {k} can reconstruct \
             part of y_{j} — S_{{{k},{j}}} must contain S_{{{k},{h}}}·Δ_{g}·S_{{{actor},{j}}}"
        );
    }
    println!(
        "{} condition(s) over horizon N={}",
        conditions.len(),
        inst.n_steps
    );
    Ok(0)
}

fn cmd_synthesize(args: SynthesizeArgs) -> Result<i32> {
    let inst = args.common.load()?;
    let spec = inst.constraints.as_ref().ok_or_else(|| {
        Error::Schema("synthesize needs a `constraints` section in the problem file".into())
    })?;
    let cost = inst.cost.as_ref().ok_or_else(|| {
        Error::Schema("synthesize needs a `cost` section in the problem file".into())
    })?;
    let lifted = LiftedSystem::build(&inst.plant, inst.n_steps);
    let assembled = assemble(
        &lifted,
        &inst.info,
        spec,
        cost,
        &inst.x0,
        AssembleOptions {
            tikhonov_q: args.tikhonov_q.unwrap_or(0.0),
            struct_tol: inst.tol,
        },
    )?;
    if assembled.conservative_restriction && !args.force_restrict {
        args.common.emit(json!({
            "status": "not_quadratically_invariant",
            "detail": "the structure is not QI for this plant, so restricting the gain to it \
                       would only bound the optimum from above; pass --force-restrict to \
                       synthesize that conservative policy anyway",
        }))?;
        return Ok(2);
    }
    if let Some(path) = &args.export_qp {
        std::fs::write(
            path,
            format!("{}\n", serde_json::to_string_pretty(&export_sparse_json(&assembled))?),
        )?;
    }
    let settings = SolverSettings {
        eps_abs: args.eps_abs,
        eps_rel: args.eps_rel,
        max_iters: args.max_iters,
        ..SolverSettings::default()
    };
    let solution = solve(&assembled.qp, &settings);
    if solution.status == SolveStatus::Infeasible {
        args.common.emit(json!({
            "status": "infeasible",
            "detail": "no policy with this structure satisfies the constraints for every \
                       disturbance in W",
            "iterations": solution.iterations,
        }))?;
        return Ok(3);
    }
    let (policy, objective) = extract(&solution, &assembled)?;
    let controller = q_to_l(&policy, &lifted, &inst.x0)?;
    args.common.emit(json!({
        "status": solution.status.to_string(),
        "objective": objective,
        "iterations": solution.iterations,
        "residuals": solution.residuals,
        "conservative_restriction": assembled.conservative_restriction,
        "controller": controller,
        "policy": policy,
    }))?;
    Ok(0)
}

fn load_controller(path: &Path) -> Result<OutputFeedbackController> {
    let text = std::fs::read_to_string(path)?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let ctrl_value = value.get("controller").unwrap_or(&value);
    Ok(serde_json::from_value(ctrl_value.clone())?)
}

fn cmd_simulate(args: SimulateArgs) -> Result<i32> {
    let inst = args.common.load()?;
    let spec = inst.constraints.as_ref().ok_or_else(|| {
        Error::Schema("simulate needs a `constraints` section in the problem file".into())
    })?;
    let ctrl = load_controller(&args.controller)?;
    if ctrl.horizon() != inst.n_steps {
        return Err(Error::dims(
            "simulate",
            format!("controller over horizon {}", inst.n_steps),
            format!("{}", ctrl.horizon()),
        ));
    }
    let method = if let Some(count) = args.samples {
        VerifyMethod::Sample { count, seed: args.seed }
    } else if args.vertices {
        VerifyMethod::Vertices { cap: args.vertex_cap }
    } else {
        return Err(Error::Schema(
            "choose a verification method: --vertices or --samples K".into(),
        ));
    };
    let report = verify_robust(&inst.plant, &ctrl, spec, &inst.x0, method)?;
    // Emit the run most worth looking at: the violating disturbance when
    // one was found, the undisturbed rollout otherwise.
    let n = inst.plant.num_states();
    let w: Vec<DVector<f64>> = match &report.violating_w {
        Some(seq) => seq.iter().map(|v| DVector::from_column_slice(v)).collect(),
        None => vec![DVector::zeros(n); inst.n_steps],
    };
    let trajectory = rollout_output_feedback(&inst.plant, &ctrl, &inst.x0, &w, inst.cost.as_ref())?;
    args.common.emit(json!({
        "report": report,
        "trajectory": trajectory,
    }))?;
    Ok(0)
}
