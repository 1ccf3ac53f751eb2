//! Batch front end: a problem (catalog entry or TOML file) in, CSV files and
//! a `summary.txt` out.
//!
//! Exit codes: `0` when every asserted check passes, `1` when a check fails
//! or a solver gives up, `2` for bad arguments or problem files.

mod output;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dsmp::adjoint::{adjoint_residuals, check_maximum_principle, duality_check, solve_adjoint_with};
use dsmp::config::{ExprProblem, ProblemFile};
use dsmp::fbsde::{
    residuals, solve_fully_coupled_newton, solve_fully_coupled_picard, solve_state, ControlledSystem, CoupledMethod, FbsdeSolution,
    NewtonConfig, PicardConfig, Residuals, SolverConfig,
};
use dsmp::linearize::Linearization;
use dsmp::monotone::{check_monotone, MonotoneMode};
use dsmp::optimizer::{evaluate, minimize, OptimizerConfig};
use dsmp::perturbation::{default_ladder, epsilon_scaling_experiment, Perturbation};
use dsmp::problem::{Coupling, Model};
use dsmp::tree::{AdaptedProcess, ScenarioTree};
use dsmp::{catalog, Error};

use output::{read_process, write_process, Cell, Summary};

/// Largest Picard/Newton disagreement accepted by `solve-fbsde full`.
const CROSS_TOL: f64 = 1e-8;
/// Allowed distance of the first-order slope from 2.
const SLOPE_TOL: f64 = 0.1;
/// Smallest accepted second-order slope.
const REMAINDER_SLOPE: f64 = 3.5;

#[derive(Debug, Parser)]
#[command(name = "dsmp", version, about = "Discrete-time forward-backward systems, adjoints and maximum-principle checks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, clap::Args)]
pub struct Common {
    /// Built-in problem; `custom` reads `--config`.
    #[arg(long, global = true)]
    pub catalog: Option<String>,
    /// Problem file (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Horizon, overriding the problem file.
    #[arg(long = "T", global = true)]
    pub horizon: Option<usize>,
    /// Increment family: rademacher, trinomial or custom.
    #[arg(long, global = true)]
    pub tree: Option<String>,
    /// Tolerance of the asserted check (command-specific default).
    #[arg(long, global = true)]
    pub tol: Option<f64>,
    /// Comma-separated, strictly decreasing ε values for `scaling`.
    #[arg(long = "eps-ladder", global = true, value_delimiter = ',')]
    pub eps_ladder: Option<Vec<f64>>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Seed for randomized directions and samples.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Control CSV (`t,node,component,value`); zero control if absent.
    #[arg(long, global = true)]
    pub control: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CouplingArg {
    Partial,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Picard,
    Newton,
    Auto,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Forward state under a control (partial coupling).
    SolveForward,
    /// Backward equation along the forward state (partial coupling).
    SolveBsde,
    /// Forward-backward system; the coupling must match the problem.
    SolveFbsde {
        coupling: CouplingArg,
        /// Solver for fully coupled systems; `auto` is Picard with a Newton
        /// fallback.
        #[arg(long, value_enum, default_value_t = MethodArg::Auto)]
        method: MethodArg,
    },
    /// Adjoint processes and their residuals.
    Adjoint,
    /// Maximum-principle certificate for a control.
    CheckMp,
    /// First-order duality identity for a random perturbation.
    Duality {
        /// Perturbation time; random if absent.
        #[arg(long)]
        s: Option<usize>,
        #[arg(long, default_value_t = 0.5)]
        eps: f64,
    },
    /// ε-scaling of the perturbed and variational processes.
    Scaling {
        #[arg(long, default_value_t = 1)]
        s: usize,
    },
    /// Projected-gradient minimization of the cost.
    Optimize {
        #[arg(long, default_value_t = 1000)]
        max_iter: usize,
    },
    /// Monotone condition of a fully coupled problem.
    ValidateMonotone {
        #[arg(long, default_value_t = 0.0)]
        alpha: f64,
        /// Use random pairs instead of the coefficient-matrix test.
        #[arg(long)]
        sampled: Option<usize>,
    },
}

/// Why a run stopped early.
#[derive(Debug)]
pub enum Failure {
    /// Bad arguments or problem description: exit 2.
    Config(String),
    /// Solver failure: exit 1.
    Solver(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::NotConverged { .. }
            | Error::SingularJacobian { .. }
            | Error::NewtonStalled { .. }
            | Error::NonFinite { .. } => Failure::Solver(e.to_string()),
            _ => Failure::Config(e.to_string()),
        }
    }
}

impl Failure {
    fn io(path: &Path, e: std::io::Error) -> Self {
        Failure::Config(format!("cannot write {}: {e}", path.display()))
    }
}

type Outcome<T> = std::result::Result<T, Failure>;

/// Problem plus tree, ready to build a [`Model`].
struct Loaded {
    problem: ExprProblem,
    tree: ScenarioTree,
}

fn load(common: &Common) -> Outcome<Loaded> {
    let (file, src) = match (common.catalog.as_deref(), &common.config) {
        (None | Some("custom"), Some(path)) => {
            let src = std::fs::read_to_string(path).map_err(|e| Failure::Config(format!("config field `config`: cannot read {}: {e}", path.display())))?;
            (ProblemFile::from_toml(&src)?, src)
        }
        (Some("custom"), None) => return Err(Failure::Config("config field `config`: catalog `custom` needs --config".into())),
        (Some(name), None) => {
            let src = catalog::source(name)?;
            (ProblemFile::from_toml(src)?, src.to_string())
        }
        (Some(_), Some(_)) => return Err(Failure::Config("config field `catalog`: give either --catalog or --config, not both".into())),
        (None, None) => {
            return Err(Failure::Config(format!(
                "config field `catalog`: no problem given; use --config or --catalog with one of: {}, custom",
                catalog::names().join(", ")
            )))
        }
    };
    let problem = ExprProblem::new(&file, &src)?;
    let tree = file.build_tree(common.horizon, common.tree.as_deref())?;
    Ok(Loaded { problem, tree })
}

fn control(common: &Common, model: &Model) -> Outcome<AdaptedProcess> {
    let u = match &common.control {
        None => model.zero_control(),
        Some(path) => read_process(path, model.tree(), model.dims().r, model.horizon() + 1)?,
    };
    model.check_admissible(&u)?;
    Ok(u)
}

fn require(model: &Model, coupling: Coupling, command: &str) -> Outcome<()> {
    if model.coupling() != coupling {
        let want = match coupling {
            Coupling::Partial => "partially",
            Coupling::Full => "fully",
        };
        return Err(Failure::Config(format!("config field `coupling`: {command} needs a {want} coupled problem")));
    }
    Ok(())
}

fn record_residuals(summary: &mut Summary, prefix: &str, r: &Residuals) {
    summary.num(&format!("{prefix}_initial_residual"), r.initial);
    summary.num(&format!("{prefix}_forward_residual"), r.forward);
    summary.num(&format!("{prefix}_backward_residual"), r.backward);
    summary.num(&format!("{prefix}_terminal_residual"), r.terminal);
    summary.num(&format!("{prefix}_orthogonality_residual"), r.orthogonality);
}

fn write_solution(out: &Path, sol: &FbsdeSolution, tree: &ScenarioTree, with_x: bool) -> Outcome<()> {
    if with_x {
        write_process(&out.join("x.csv"), &sol.x, tree)?;
    }
    write_process(&out.join("y.csv"), &sol.y, tree)?;
    write_process(&out.join("z.csv"), &sol.z, tree)?;
    write_process(&out.join("n.csv"), &sol.n, tree)
}

fn execute(cli: &Cli, summary: &mut Summary) -> Outcome<bool> {
    let common = &cli.common;
    let loaded = load(common)?;
    let tree = &loaded.tree;
    let model = Model::new(&loaded.problem, tree)?;
    let out = &common.out;
    std::fs::create_dir_all(out).map_err(|e| Failure::io(out, e))?;
    summary.text("problem", &loaded.problem.name);
    summary.text("horizon", &tree.horizon().to_string());
    summary.text("nodes", &tree.total_nodes().to_string());
    let u = control(common, &model)?;
    let cfg = SolverConfig::default();
    let tol = |default: f64| common.tol.unwrap_or(default);

    match &cli.command {
        Command::SolveForward => {
            summary.text("command", "solve-forward");
            require(&model, Coupling::Partial, "solve-forward")?;
            let sol = solve_state(&model, &u, &cfg)?;
            write_process(&out.join("x.csv"), &sol.x, tree)?;
            let sys = ControlledSystem::new(&model, &u);
            let r = residuals(tree, &sys, &sol)?;
            let limit = tol(1e-10);
            summary.num("forward_residual", r.forward.max(r.initial));
            summary.num("tol", limit);
            Ok(r.forward.max(r.initial) <= limit)
        }
        Command::SolveBsde => {
            summary.text("command", "solve-bsde");
            require(&model, Coupling::Partial, "solve-bsde")?;
            let sol = solve_state(&model, &u, &cfg)?;
            write_solution(out, &sol, tree, false)?;
            let y0 = AdaptedProcess::from_fn(tree, sol.y.rows(), 1, 1, |_, a| sol.y.slice(0, a).to_vec());
            write_process(&out.join("y0.csv"), &y0, tree)?;
            let r = residuals(tree, &ControlledSystem::new(&model, &u), &sol)?;
            for (i, v) in sol.y.slice(0, 0).iter().enumerate() {
                summary.num(&format!("y0[{i}]"), *v);
            }
            summary.num("backward_residual", r.backward.max(r.terminal));
            summary.num("orthogonality_residual", r.orthogonality);
            let limit = tol(1e-10);
            summary.num("tol", limit);
            Ok(r.backward.max(r.terminal).max(r.orthogonality) <= limit)
        }
        Command::SolveFbsde { coupling, method } => {
            summary.text("command", "solve-fbsde");
            let want = match coupling {
                CouplingArg::Partial => Coupling::Partial,
                CouplingArg::Full => Coupling::Full,
            };
            require(&model, want, "this mode")?;
            let limit = tol(1e-10);
            summary.num("tol", limit);
            let sys = ControlledSystem::new(&model, &u);
            if want == Coupling::Partial {
                let sol = solve_state(&model, &u, &cfg)?;
                write_solution(out, &sol, tree, true)?;
                let r = residuals(tree, &sys, &sol)?;
                record_residuals(summary, "fbsde", &r);
                return Ok(r.max() <= limit);
            }
            let picard_cfg = PicardConfig { tol: limit.min(PicardConfig::default().tol), ..PicardConfig::default() };
            let newton_cfg = NewtonConfig::default();
            let (sol, other) = match method {
                MethodArg::Picard => {
                    let p = solve_fully_coupled_picard(&model, &u, &picard_cfg)?;
                    summary.text("picard_iterations", &p.iterations.to_string());
                    (p.solution, solve_fully_coupled_newton(&model, &u, &newton_cfg).ok().map(|n| n.solution))
                }
                MethodArg::Newton => {
                    let n = solve_fully_coupled_newton(&model, &u, &newton_cfg)?;
                    summary.text("newton_iterations", &n.iterations.to_string());
                    (n.solution, solve_fully_coupled_picard(&model, &u, &picard_cfg).ok().map(|p| p.solution))
                }
                MethodArg::Auto => {
                    let auto = SolverConfig { method: CoupledMethod::PicardThenNewton, picard: picard_cfg, newton: newton_cfg };
                    let sol = solve_state(&model, &u, &auto)?;
                    let other = solve_fully_coupled_newton(&model, &u, &newton_cfg).ok().map(|n| n.solution);
                    (sol, other)
                }
            };
            write_solution(out, &sol, tree, true)?;
            let r = residuals(tree, &sys, &sol)?;
            record_residuals(summary, "fbsde", &r);
            let mut ok = r.max() <= limit;
            match other {
                Some(o) => {
                    let gap = sol.x.sup_distance(&o.x).max(sol.y.sup_distance(&o.y)).max(sol.z.sup_distance(&o.z));
                    summary.num("cross_solver_gap", gap);
                    ok &= gap <= CROSS_TOL;
                }
                None => summary.text("cross_solver_gap", "unavailable"),
            }
            Ok(ok)
        }
        Command::Adjoint => {
            summary.text("command", "adjoint");
            let traj = solve_state(&model, &u, &cfg)?;
            let lin = Linearization::new(&model, &traj, &u)?;
            let adj = solve_adjoint_with(&model, &lin, &cfg)?;
            write_process(&out.join("p.csv"), &adj.p, tree)?;
            write_process(&out.join("q.csv"), &adj.q, tree)?;
            write_process(&out.join("big_q.csv"), &adj.big_q, tree)?;
            write_process(&out.join("k.csv"), &adj.k, tree)?;
            let r = adjoint_residuals(&model, &lin, &adj)?;
            record_residuals(summary, "adjoint", &r);
            let limit = tol(1e-10);
            summary.num("tol", limit);
            Ok(r.max() <= limit)
        }
        Command::CheckMp => {
            summary.text("command", "check-mp");
            let limit = tol(1e-6);
            let ev = evaluate(&model, &u, &cfg)?;
            let report = check_maximum_principle(&model, &u, &ev.grad_h, limit);
            output::write_mp(&out.join("mp.csv"), &report)?;
            summary.num("cost", ev.cost);
            summary.num("max_violation", report.max_violation);
            if let Some((t, a)) = report.location {
                summary.text("worst_node", &format!("t={t} node={a}"));
            }
            summary.num("tol", limit);
            Ok(report.passed)
        }
        Command::Duality { s, eps } => {
            summary.text("command", "duality");
            let mut rng = ChaCha8Rng::seed_from_u64(common.seed);
            let s = s.unwrap_or_else(|| rng.random_range(0..tree.horizon()));
            let r = model.dims().r;
            let dv = (0..tree.level_size(s.min(tree.horizon()))).map(|_| DVector::from_fn(r, |_, _| rng.random_range(-1.0..1.0))).collect();
            let pert = Perturbation { s, dv, eps: *eps };
            let rep = duality_check(&model, &u, &pert, &cfg)?;
            let limit = tol(1e-10);
            output::write_rows(
                &out.join("duality.csv"),
                &["s", "eps", "lhs", "rhs", "gap"],
                &[vec![Cell::Int(s), Cell::Num(*eps), Cell::Num(rep.lhs), Cell::Num(rep.rhs), Cell::Num(rep.gap)]],
            )?;
            summary.text("s", &s.to_string());
            summary.num("lhs", rep.lhs);
            summary.num("rhs", rep.rhs);
            summary.num("gap", rep.gap);
            summary.num("tol", limit);
            Ok(rep.gap <= limit * (1.0 + rep.lhs.abs()))
        }
        Command::Scaling { s } => {
            summary.text("command", "scaling");
            let ladder = common.eps_ladder.clone().unwrap_or_else(default_ladder);
            let mut rng = ChaCha8Rng::seed_from_u64(common.seed);
            let r = model.dims().r;
            let dv: Vec<f64> = (0..r).map(|_| rng.random_range(0.5..1.0)).collect();
            let pert = Perturbation::uniform(tree, *s, &dv, 1.0);
            let rep = epsilon_scaling_experiment(&model, &u, &pert, &ladder, &cfg)?;
            let rows: Vec<Vec<Cell>> = rep
                .rows
                .iter()
                .map(|r| [r.eps, r.a_x, r.a_y, r.a_z, r.b_x, r.b_y, r.b_z, r.cost_remainder].map(Cell::Num).to_vec())
                .collect();
            output::write_rows(
                &out.join("scaling.csv"),
                &["eps", "a_x", "a_y", "a_z", "b_xi", "b_eta", "b_zeta", "cost_remainder"],
                &rows,
            )?;
            let sl = rep.slopes;
            for (name, v) in [
                ("slope_a_x", sl.a_x),
                ("slope_a_y", sl.a_y),
                ("slope_a_z", sl.a_z),
                ("slope_b_xi", sl.b_x),
                ("slope_b_eta", sl.b_y),
                ("slope_b_zeta", sl.b_z),
                ("slope_cost_remainder", sl.cost_remainder),
            ] {
                match v {
                    Some(v) => summary.num(name, v),
                    None => summary.text(name, "exact (below noise floor)"),
                }
            }
            let slope_tol = common.tol.unwrap_or(SLOPE_TOL);
            let first = sl.a_x.is_none_or(|v| (v - 2.0).abs() <= slope_tol);
            let second = [sl.b_x, sl.b_y, sl.b_z].iter().all(|v| v.is_none_or(|v| v >= REMAINDER_SLOPE));
            Ok(first && second)
        }
        Command::Optimize { max_iter } => {
            summary.text("command", "optimize");
            let limit = tol(1e-8);
            let ocfg = OptimizerConfig {
                initial: Some(u),
                tol: limit,
                max_iter: *max_iter,
                ..OptimizerConfig::default()
            };
            let res = minimize(&model, &ocfg)?;
            let rows: Vec<Vec<Cell>> = res
                .trace
                .iter()
                .map(|r| vec![Cell::Int(r.iteration), Cell::Num(r.cost), Cell::Num(r.step), Cell::Num(r.mp_residual)])
                .collect();
            output::write_rows(&out.join("trace.csv"), &["iteration", "J", "step", "mp_residual"], &rows)?;
            write_process(&out.join("control.csv"), &res.control, tree)?;
            output::write_mp(&out.join("mp.csv"), &res.report)?;
            summary.num("cost", res.evaluation.cost);
            summary.num("mp_residual", res.mp_residual);
            summary.text("iterations", &res.iterations.to_string());
            summary.text("stalled", &res.stalled.to_string());
            summary.num("tol", limit);
            Ok(res.converged(limit))
        }
        Command::ValidateMonotone { alpha, sampled } => {
            summary.text("command", "validate-monotone");
            let mode = match sampled {
                Some(samples) => MonotoneMode::Sampled { samples: *samples, seed: common.seed },
                None => MonotoneMode::LinearExact,
            };
            let rep = check_monotone(&model, &u, mode, *alpha)?;
            let rows: Vec<Vec<Cell>> = rep.cases.iter().map(|c| vec![Cell::Int(c.t), Cell::Int(c.node), Cell::Num(c.worst)]).collect();
            output::write_rows(&out.join("monotone.csv"), &["t", "node", "worst"], &rows)?;
            summary.num("alpha", *alpha);
            summary.num("alpha_estimate", rep.alpha_estimate);
            summary.num("violation", rep.violation);
            if let Some((t, a)) = rep.location {
                summary.text("worst_node", &format!("t={t} node={a}"));
            }
            Ok(rep.passed)
        }
    }
}

/// Parses `args` (including the program name), runs the command and
/// returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let mut summary = Summary::default();
    let code = match execute(&cli, &mut summary) {
        Ok(passed) => {
            summary.text("status", if passed { "PASS" } else { "FAIL" });
            if passed {
                0
            } else {
                1
            }
        }
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            return 2;
        }
        Err(Failure::Solver(msg)) => {
            eprintln!("error: {msg}");
            summary.text("status", "FAIL");
            summary.text("error", &msg);
            1
        }
    };
    print!("{}", summary.render());
    if let Err(e) = summary.write(&cli.common.out.join("summary.txt")) {
        eprintln!("error: cannot write summary: {e}");
        return 2;
    }
    code
}
