//! Cost functional, adjoint gradient and projected-gradient descent.
//!
//! Gradients are stored per `(t, node)` without probability weights; inner
//! products in the descent test carry the weights, so
//! `d/dε J(u + εδ) = Σ_t E⟨∇J_t, δ_t⟩`.

use log::{debug, info};

use crate::adjoint::{check_maximum_principle, hamiltonian_gradients, solve_adjoint_with, AdjointSolution, MpReport};
use crate::error::{Error, Result};
use crate::fbsde::{solve_state, FbsdeSolution, SolverConfig};
use crate::linearize::{trajectory_vars, Linearization};
use crate::problem::{Model, Vars};
use crate::tree::AdaptedProcess;

/// `J = E[Σ_{t<T} l(t, X_t, Y_t, Z_t, u_t) + h(X_T)]` along a solved
/// trajectory.
pub fn cost_along(model: &Model, traj: &FbsdeSolution, u: &AdaptedProcess) -> Result<f64> {
    let tree = model.tree();
    let horizon = tree.horizon();
    let mut j = 0.0;
    for t in 0..horizon {
        for a in 0..tree.level_size(t) {
            let (x, y, z, uu) = trajectory_vars(model, traj, u, t, a);
            let l = model.running_cost(t, a, &Vars { x: &x, y: &y, z: &z, u: &uu })?;
            j += tree.node_probability(t, a) * l;
        }
    }
    for a in 0..tree.level_size(horizon) {
        j += tree.node_probability(horizon, a) * model.terminal_cost(a, traj.x.slice(horizon, a))?;
    }
    Ok(j)
}

pub fn cost(model: &Model, u: &AdaptedProcess, cfg: &SolverConfig) -> Result<f64> {
    let traj = solve_state(model, u, cfg)?;
    cost_along(model, &traj, u)
}

/// Everything computed at one control.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub cost: f64,
    pub state: FbsdeSolution,
    pub adjoint: AdjointSolution,
    /// `H_u` on `t < T`.
    pub grad_h: AdaptedProcess,
}

impl Evaluation {
    /// `∇J = -H_u`.
    pub fn gradient(&self) -> AdaptedProcess {
        let mut g = self.grad_h.clone();
        g.scale(-1.0);
        g
    }
}

pub fn evaluate(model: &Model, u: &AdaptedProcess, cfg: &SolverConfig) -> Result<Evaluation> {
    let state = solve_state(model, u, cfg)?;
    let cost = cost_along(model, &state, u)?;
    let lin = Linearization::new(model, &state, u)?;
    let adjoint = solve_adjoint_with(model, &lin, cfg)?;
    let grad_h = hamiltonian_gradients(model, &lin, &adjoint);
    Ok(Evaluation {
        cost,
        state,
        adjoint,
        grad_h,
    })
}

/// `∇J` per `(t, node)` on `t < T`.
pub fn gradient(model: &Model, u: &AdaptedProcess, cfg: &SolverConfig) -> Result<AdaptedProcess> {
    Ok(evaluate(model, u, cfg)?.gradient())
}

/// Componentwise clamp of `u` into the boxes on `t < T`; the time-`T` slot
/// is left alone.
pub fn project(model: &Model, u: &AdaptedProcess) -> Result<AdaptedProcess> {
    let tree = model.tree();
    let mut out = u.clone();
    for t in 0..tree.horizon().min(u.times()) {
        let bx = model.control_box(t);
        bx.validate()?;
        for a in 0..tree.level_size(t) {
            bx.clamp(out.slice_mut(t, a));
        }
    }
    Ok(out)
}

/// `Σ_{t<T} E⟨a_t, b_t⟩`.
pub fn weighted_inner(model: &Model, a: &AdaptedProcess, b: &AdaptedProcess) -> f64 {
    let tree = model.tree();
    let mut s = 0.0;
    for t in 0..tree.horizon() {
        for node in 0..tree.level_size(t) {
            let dot: f64 = a.slice(t, node).iter().zip(b.slice(t, node)).map(|(x, y)| x * y).sum();
            s += tree.node_probability(t, node) * dot;
        }
    }
    s
}

/// Relative size of cost changes treated as rounding noise by the
/// backtracking test.
pub const COST_NOISE: f64 = 1e-14;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepRule {
    Fixed(f64),
    /// Start at `initial` each iteration, multiply by `shrink` until
    /// `J(u⁺) ≤ J(u) + armijo · E⟨∇J, u⁺ - u⟩`. Once the predicted decrease
    /// is below [`COST_NOISE`], a step is accepted if `J` does not rise by
    /// more than that noise and the certificate residual shrinks.
    Backtracking { initial: f64, armijo: f64, shrink: f64 },
}

impl Default for StepRule {
    fn default() -> Self {
        StepRule::Backtracking {
            initial: 1.0,
            armijo: 1e-4,
            shrink: 0.5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimizerConfig {
    pub step: StepRule,
    /// Starting control; zero (then projected) when absent.
    pub initial: Option<AdaptedProcess>,
    /// Stop once the maximum-principle residual is at most this.
    pub tol: f64,
    pub max_iter: usize,
    pub solver: SolverConfig,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            step: StepRule::default(),
            initial: None,
            tol: 1e-8,
            max_iter: 1000,
            solver: SolverConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub cost: f64,
    pub step: f64,
    pub mp_residual: f64,
}

#[derive(Debug, Clone)]
pub struct OptimizationResult {
    pub control: AdaptedProcess,
    pub cost_history: Vec<f64>,
    pub mp_residual: f64,
    pub iterations: usize,
    pub trace: Vec<TraceRow>,
    /// No admissible decrease was found before the step underflowed; the
    /// returned control is the best iterate.
    pub stalled: bool,
    pub report: MpReport,
    pub evaluation: Evaluation,
}

impl OptimizationResult {
    pub fn converged(&self, tol: f64) -> bool {
        self.mp_residual <= tol
    }
}

/// Projected gradient descent `u ← Π(u - γ ∇J)` certified by the
/// maximum-principle residual.
pub fn minimize(model: &Model, cfg: &OptimizerConfig) -> Result<OptimizationResult> {
    if !(cfg.tol > 0.0) {
        return Err(Error::Precondition("optimizer tolerance must be positive".into()));
    }
    match cfg.step {
        StepRule::Fixed(g) if !(g > 0.0) => return Err(Error::Precondition("step size must be positive".into())),
        StepRule::Backtracking { initial, shrink, .. } if !(initial > 0.0) || !(shrink > 0.0 && shrink < 1.0) => {
            return Err(Error::Precondition("backtracking needs initial > 0 and shrink in (0, 1)".into()))
        }
        _ => {}
    }
    let start = cfg.initial.clone().unwrap_or_else(|| model.zero_control());
    let mut u = project(model, &start)?;
    let mut eval = evaluate(model, &u, &cfg.solver)?;
    let mut report = check_maximum_principle(model, &u, &eval.grad_h, cfg.tol);
    let mut history = vec![eval.cost];
    let mut trace = vec![TraceRow {
        iteration: 0,
        cost: eval.cost,
        step: 0.0,
        mp_residual: report.max_violation,
    }];
    let mut stalled = false;
    let mut iterations = 0;
    while report.max_violation > cfg.tol && iterations < cfg.max_iter {
        let grad = eval.gradient();
        let mut gamma = match cfg.step {
            StepRule::Fixed(g) => g,
            StepRule::Backtracking { initial, .. } => initial,
        };
        let accepted = loop {
            let mut trial = u.clone();
            for t in 0..model.horizon() {
                for a in 0..model.tree().level_size(t) {
                    let g = grad.slice(t, a).to_vec();
                    for (v, gj) in trial.slice_mut(t, a).iter_mut().zip(g) {
                        *v -= gamma * gj;
                    }
                }
            }
            let trial = project(model, &trial)?;
            let dir = trial.difference(&u);
            if dir.sup_norm() == 0.0 {
                break None;
            }
            let decrease = weighted_inner(model, &grad, &dir);
            // below this, cost differences are rounding noise; fall back to
            // asking for no cost increase and a smaller certificate residual
            let noise = COST_NOISE * (1.0 + eval.cost.abs());
            let found = match cfg.step {
                StepRule::Fixed(_) => Some((trial, None)),
                StepRule::Backtracking { armijo, .. } if -armijo * decrease <= noise => {
                    let ev = evaluate(model, &trial, &cfg.solver)?;
                    let rep = check_maximum_principle(model, &trial, &ev.grad_h, cfg.tol);
                    (ev.cost <= eval.cost + noise && rep.max_violation < report.max_violation).then_some((trial, Some((ev, rep))))
                }
                StepRule::Backtracking { armijo, .. } => {
                    let jt = cost(model, &trial, &cfg.solver)?;
                    (jt <= eval.cost + armijo * decrease && jt < eval.cost).then_some((trial, None))
                }
            };
            if found.is_some() {
                break found;
            }
            if let StepRule::Backtracking { shrink, .. } = cfg.step {
                gamma *= shrink;
            }
            if gamma < 1e-20 {
                break None;
            }
        };
        let Some((next, done)) = accepted else {
            stalled = true;
            info!("no decrease found at iteration {}; returning best iterate", iterations + 1);
            break;
        };
        iterations += 1;
        u = next;
        (eval, report) = match done {
            Some(pair) => pair,
            None => {
                let ev = evaluate(model, &u, &cfg.solver)?;
                let rep = check_maximum_principle(model, &u, &ev.grad_h, cfg.tol);
                (ev, rep)
            }
        };
        history.push(eval.cost);
        trace.push(TraceRow {
            iteration: iterations,
            cost: eval.cost,
            step: gamma,
            mp_residual: report.max_violation,
        });
        debug!("iteration {iterations}: J = {:.12e}, step {gamma}, MP residual {:.3e}", eval.cost, report.max_violation);
    }
    Ok(OptimizationResult {
        control: u,
        cost_history: history,
        mp_residual: report.max_violation,
        iterations,
        trace,
        stalled,
        report,
        evaluation: eval,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linear::{random_partial, LinearProblem};
    use crate::problem::{ControlBox, Coupling, Dims};
    use crate::tree::{IncrementDistribution, ScenarioTree};
    use rand::SeedableRng;

    fn scalar() -> LinearProblem {
        LinearProblem::zeros(Dims { n: 1, m: 1, d: 1, r: 1 }, Coupling::Partial)
    }

    /// Riccati recursion for `ΔX = u + ΔW`, `l = x² + u²`, `h = x²`:
    /// `V_t(x) = a_t x² + c_t`.
    fn lq_dp_value(horizon: usize) -> f64 {
        let (mut a, mut c) = (1.0, 0.0);
        for _ in 0..horizon {
            c += a;
            a = 1.0 + a / (1.0 + a);
        }
        c
    }

    /// `J` for the scalar LQ instance by walking every path.
    fn lq_path_cost(tree: &ScenarioTree, u: &AdaptedProcess) -> f64 {
        fn walk(tree: &ScenarioTree, u: &AdaptedProcess, t: usize, a: usize, x: f64, prob: f64) -> f64 {
            if t == tree.horizon() {
                return prob * x * x;
            }
            let v = u.slice(t, a)[0];
            let here = prob * (x * x + v * v);
            let step = tree.step(t);
            here + (0..step.len())
                .map(|k| walk(tree, u, t + 1, tree.child(t, a, k), x + v + step.atom(k)[0], prob * step.prob(k)))
                .sum::<f64>()
        }
        walk(tree, u, 0, 0, 0.0, 1.0)
    }

    #[test]
    fn cost_examples() {
        let tree = ScenarioTree::product(4, IncrementDistribution::rademacher(1)).unwrap();
        let cfg = SolverConfig::default();
        let zero = scalar();
        let model = Model::new(&zero, &tree).unwrap();
        assert_eq!(cost(&model, &AdaptedProcess::constant(&tree, &[0.3], 5), &cfg).unwrap(), 0.0);
        let mut p = scalar();
        p.qu[(0, 0)] = 2.0;
        let model = Model::new(&p, &tree).unwrap();
        let j = cost(&model, &AdaptedProcess::constant(&tree, &[0.3], 5), &cfg).unwrap();
        assert!((j - 4.0 * 0.09).abs() < 1e-15);

        let lq = LinearProblem::scalar_lq();
        let model = Model::new(&lq, &tree).unwrap();
        let u = AdaptedProcess::from_fn(&tree, 1, 1, 5, |t, a| vec![0.1 * t as f64 - 0.05 * a as f64]);
        assert!((cost(&model, &u, &cfg).unwrap() - lq_path_cost(&tree, &u)).abs() < 1e-12);
    }

    #[test]
    fn gradient_examples() {
        let tree = ScenarioTree::product(3, IncrementDistribution::trinomial(2)).unwrap();
        let cfg = SolverConfig::default();
        let mut p = LinearProblem::zeros(Dims { n: 1, m: 2, d: 2, r: 2 }, Coupling::Partial);
        p.bu = nalgebra::DMatrix::identity(2, 2);
        let model = Model::new(&p, &tree).unwrap();
        assert_eq!(gradient(&model, &model.zero_control(), &cfg).unwrap().sup_norm(), 0.0);

        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let p = random_partial(&mut rng, Dims { n: 2, m: 2, d: 2, r: 2 }, true);
        let model = Model::new(&p, &tree).unwrap();
        let u = AdaptedProcess::from_fn(&tree, 2, 1, 4, |t, a| vec![0.2 * t as f64, 0.1 - 0.03 * a as f64]);
        let g = gradient(&model, &u, &cfg).unwrap();
        let h = 1e-4;
        for t in 0..3 {
            for a in 0..tree.level_size(t) {
                for j in 0..2 {
                    let mut up = u.clone();
                    up.slice_mut(t, a)[j] += h;
                    let mut dn = u.clone();
                    dn.slice_mut(t, a)[j] -= h;
                    let fd = (cost(&model, &up, &cfg).unwrap() - cost(&model, &dn, &cfg).unwrap()) / (2.0 * h) / tree.node_probability(t, a);
                    let gj = g.slice(t, a)[j];
                    assert!((fd - gj).abs() <= 1e-6 * (1.0 + gj.abs()), "t={t} a={a} j={j}: {fd} vs {gj}");
                }
            }
        }
    }

    #[test]
    fn projection() {
        let tree = ScenarioTree::product(2, IncrementDistribution::rademacher(1)).unwrap();
        let mut p = scalar();
        p.bounds = ControlBox::new(vec![-1.0], vec![0.5]).unwrap();
        let model = Model::new(&p, &tree).unwrap();
        let u = AdaptedProcess::from_fn(&tree, 1, 1, 3, |t, a| vec![[0.2, 3.0, -4.0][t] + a as f64 * 0.0]);
        let once = project(&model, &u).unwrap();
        assert_eq!(once.slice(0, 0), &[0.2]);
        assert_eq!(once.slice(1, 1), &[0.5]);
        // t = T is not a decision time
        assert_eq!(once.slice(2, 0), &[-4.0]);
        assert_eq!(project(&model, &once).unwrap(), once);
    }

    #[test]
    fn lq_optimum_matches_dynamic_programming() {
        let tree = ScenarioTree::product(4, IncrementDistribution::rademacher(1)).unwrap();
        let lq = LinearProblem::scalar_lq();
        let model = Model::new(&lq, &tree).unwrap();
        let cfg = OptimizerConfig { tol: 1e-9, ..Default::default() };
        let res = minimize(&model, &cfg).unwrap();
        assert!(!res.stalled);
        assert!(res.mp_residual <= 1e-9);
        assert!((res.evaluation.cost - lq_dp_value(4)).abs() <= 1e-8, "{} vs {}", res.evaluation.cost, lq_dp_value(4));
        assert!(res.cost_history.windows(2).all(|w| w[1] <= w[0] + COST_NOISE * (1.0 + w[0].abs())));
        assert!(res.evaluation.gradient().sup_norm() <= 1e-8);
        let again = check_maximum_principle(&model, &res.control, &res.evaluation.grad_h, cfg.tol);
        assert!((again.max_violation - res.mp_residual).abs() <= 1e-12);

        // move one node off the optimum
        let mut off = res.control.clone();
        off.slice_mut(2, 1)[0] += 0.1;
        let ev = evaluate(&model, &off, &cfg.solver).unwrap();
        let rep = check_maximum_principle(&model, &off, &ev.grad_h, 1e-6);
        assert!(!rep.passed);
        assert_eq!(rep.location, Some((2, 1)));
    }

    #[test]
    fn zero_cost_needs_no_iterations() {
        let tree = ScenarioTree::product(3, IncrementDistribution::trinomial(1)).unwrap();
        let mut p = scalar();
        p.bu[(0, 0)] = 1.0;
        p.s0[0] = 1.0;
        let model = Model::new(&p, &tree).unwrap();
        let cfg = OptimizerConfig {
            initial: Some(AdaptedProcess::constant(&tree, &[0.7], 4)),
            ..Default::default()
        };
        let res = minimize(&model, &cfg).unwrap();
        assert_eq!(res.iterations, 0);
        assert_eq!(res.mp_residual, 0.0);
    }

    #[test]
    fn tight_box_optimum_sits_on_the_bound() {
        // J = E[X_T] with ΔX = u + ΔW: push u to the lower bound everywhere
        let tree = ScenarioTree::product(3, IncrementDistribution::rademacher(1)).unwrap();
        let mut p = scalar();
        p.bu[(0, 0)] = 1.0;
        p.s0[0] = 1.0;
        p.hc[0] = 1.0;
        p.qu[(0, 0)] = 0.2;
        p.bounds = ControlBox::new(vec![-1.0], vec![1.0]).unwrap();
        let model = Model::new(&p, &tree).unwrap();
        let res = minimize(&model, &OptimizerConfig::default()).unwrap();
        assert!(res.report.passed);
        for t in 0..3 {
            assert!(res.control.level(t).iter().all(|v| *v == -1.0));
        }
        assert!(res.report.rows.iter().all(|r| r.active_string() == "L"));
        assert!((res.evaluation.cost - (-3.0 + 0.3)).abs() < 1e-12);
    }

    #[test]
    fn invalid_configs() {
        let tree = ScenarioTree::product(1, IncrementDistribution::rademacher(1)).unwrap();
        let p = LinearProblem::scalar_lq();
        let model = Model::new(&p, &tree).unwrap();
        assert!(minimize(&model, &OptimizerConfig { tol: 0.0, ..Default::default() }).is_err());
        assert!(minimize(&model, &OptimizerConfig { step: StepRule::Fixed(-1.0), ..Default::default() }).is_err());
    }
}
