//! Adjoint processes, the Hamiltonian and the maximum-principle checks.
//!
//! `H(t, u, x, y, z, p, q, k) = b^* p + Σ_i σ_i^* q e_i - f^* k - l`. An
//! optimal control maximizes `H` over `U_t` in the first-order sense
//! `⟨H_u, v - ū_t⟩ ≤ 0`; the cost gradient is `-H_u`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::fbsde::{residuals, solve_system, FbsdeSolution, FbsdeSystem, Residuals, SolverConfig};
use crate::linearize::{adjoint_system, trajectory_vars, Linearization};
use crate::perturbation::{first_order_cost, solve_variational_with, Perturbation};
use crate::problem::{Coupling, Model, Vars};
use crate::tree::AdaptedProcess;

/// Solution of the adjoint equations.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjointSolution {
    /// `m`-vectors on `t = 0..=T`.
    pub p: AdaptedProcess,
    /// `m × d` on `t = 0..T`.
    pub q: AdaptedProcess,
    /// Orthogonal remainder of the `p` equation, `Q_0 = 0`.
    pub big_q: AdaptedProcess,
    /// `n`-vectors on `t = 0..=T`, `k_0 = 0`.
    pub k: AdaptedProcess,
}

impl AdjointSolution {
    fn from_system(sol: FbsdeSolution) -> Self {
        AdjointSolution {
            p: sol.y,
            q: sol.z,
            big_q: sol.n,
            k: sol.x,
        }
    }

    fn as_system(&self) -> FbsdeSolution {
        FbsdeSolution {
            x: self.k.clone(),
            y: self.p.clone(),
            z: self.q.clone(),
            n: self.big_q.clone(),
        }
    }
}

/// Adjoint along `traj` under `u` for either coupling.
pub fn solve_adjoint(model: &Model, traj: &FbsdeSolution, u: &AdaptedProcess, cfg: &SolverConfig) -> Result<AdjointSolution> {
    let lin = Linearization::new(model, traj, u)?;
    solve_adjoint_with(model, &lin, cfg)
}

pub fn solve_adjoint_with(model: &Model, lin: &Linearization, cfg: &SolverConfig) -> Result<AdjointSolution> {
    let sys = adjoint_system(model, lin);
    Ok(AdjointSolution::from_system(solve_system(model.tree(), &sys, cfg)?))
}

/// Adjoint of a partially coupled problem: `k` rolled forward, then one
/// backward sweep for `(p, q, Q)`.
pub fn solve_adjoint_partial(model: &Model, traj: &FbsdeSolution, u: &AdaptedProcess) -> Result<AdjointSolution> {
    if model.coupling() != Coupling::Partial {
        return Err(Error::Precondition("solve_adjoint_partial needs a partially coupled problem".into()));
    }
    solve_adjoint(model, traj, u, &SolverConfig::default())
}

/// Adjoint of a fully coupled problem through the coupled solvers.
pub fn solve_adjoint_fully(model: &Model, traj: &FbsdeSolution, u: &AdaptedProcess, cfg: &SolverConfig) -> Result<AdjointSolution> {
    if model.coupling() != Coupling::Full {
        return Err(Error::Precondition("solve_adjoint_fully needs a fully coupled problem".into()));
    }
    if model.dims().d != 1 && !(cfg.picard.allow_multidim && cfg.newton.allow_multidim) {
        return Err(Error::Precondition(format!(
            "fully coupled adjoint defaults to d = 1 (got d = {})",
            model.dims().d
        )));
    }
    solve_adjoint(model, traj, u, cfg)
}

/// Edge-wise residuals of an adjoint solution.
pub fn adjoint_residuals(model: &Model, lin: &Linearization, adj: &AdjointSolution) -> Result<Residuals> {
    let sys = adjoint_system(model, lin);
    residuals(model.tree(), &sys as &dyn FbsdeSystem, &adj.as_system())
}

/// Explicit adjoint of the classical case (`f ≡ 0`, `b, σ, l` free of
/// `y, z`): `p_T = -h_x(X_T)` and, for `t < T`,
///
/// ```text
/// G    = (I + b_x^*(t+1)) p_{t+1} - l_x(t+1) + Σ_i σ_ix^*(t+1) q_{t+1} e_i
/// p_t  = E[G | F_t],   q_t = E[G ΔW_t^* | F_t]
/// ```
///
/// computed directly from the tree weights.
pub fn explicit_classical_adjoint(model: &Model, x: &AdaptedProcess, u: &AdaptedProcess) -> Result<(AdaptedProcess, AdaptedProcess)> {
    const TOL: f64 = 1e-12;
    let tree = model.tree();
    let dims = model.dims();
    let (n, m, d) = (dims.n, dims.m, dims.d);
    let horizon = tree.horizon();
    if model.coupling() != Coupling::Partial {
        return Err(Error::Precondition("explicit adjoint needs partial coupling".into()));
    }
    let zy = vec![0.0; n];
    let zz = vec![0.0; n * d];
    // b_x, σ_x, l_x at every node, checking the preconditions on the way
    let mut bx: Vec<Vec<DMatrix<f64>>> = Vec::new();
    let mut sx: Vec<Vec<DMatrix<f64>>> = Vec::new();
    let mut lx: Vec<Vec<DVector<f64>>> = Vec::new();
    for t in 0..=horizon {
        let (mut bl, mut sl, mut ll) = (Vec::new(), Vec::new(), Vec::new());
        for a in 0..tree.level_size(t) {
            let uu = if t < u.times() { u.slice(t, a).to_vec() } else { vec![0.0; dims.r] };
            let v = Vars { x: x.slice(t, a), y: &zy, z: &zz, u: &uu };
            let fj = model.generator_jacobian(t, a, &v)?;
            let lj = model.running_cost_gradient(t, a, &v)?;
            let f_dep = fj.x.amax().max(fj.y.amax()).max(fj.z.amax());
            let l_dep = lj.y.amax().max(lj.z.amax());
            if f_dep > TOL || l_dep > TOL {
                return Err(Error::Precondition(format!(
                    "explicit adjoint needs f ≡ 0 and l free of (y, z); found dependence {:.3e} at t={t}",
                    f_dep.max(l_dep)
                )));
            }
            bl.push(model.drift_jacobian(t, a, &v)?.x);
            sl.push(model.diffusion_jacobian(t, a, &v)?.x);
            ll.push(lj.x.row(0).transpose());
        }
        bx.push(bl);
        sx.push(sl);
        lx.push(ll);
    }
    let mut p = AdaptedProcess::zeros(tree, m, 1, horizon + 1);
    let mut q = AdaptedProcess::zeros(tree, m, d, horizon);
    for a in 0..tree.level_size(horizon) {
        let hx = model.terminal_cost_gradient(a, x.slice(horizon, a))?;
        p.set(horizon, a, (-hx).as_slice());
    }
    let eye = DMatrix::<f64>::identity(m, m);
    for t in (0..horizon).rev() {
        let step = tree.step(t);
        for a in 0..tree.level_size(t) {
            let mut pt = DVector::zeros(m);
            let mut qt = DMatrix::zeros(m, d);
            for k in 0..step.len() {
                let c = tree.child(t, a, k);
                let mut g = (&eye + bx[t + 1][c].transpose()) * p.vector(t + 1, c) - &lx[t + 1][c];
                if t + 1 < horizon {
                    let qn = q.matrix(t + 1, c);
                    for i in 0..d {
                        g += sx[t + 1][c].rows(i * m, m).transpose() * qn.column(i);
                    }
                }
                pt.axpy(step.prob(k), &g, 1.0);
                for (j, wj) in step.atom(k).iter().enumerate() {
                    qt.column_mut(j).axpy(step.prob(k) * wj, &g, 1.0);
                }
            }
            p.set(t, a, pt.as_slice());
            q.set(t, a, qt.as_slice());
        }
    }
    Ok((p, q))
}

/// Hamiltonian value and `u`-gradient at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct HamiltonianEval {
    pub value: f64,
    pub grad_u: DVector<f64>,
}

/// `H` and `H_u` at `(t, node)`; `q` is `m × d`.
pub fn hamiltonian(model: &Model, t: usize, node: usize, vars: &Vars, p: &DVector<f64>, q: &DMatrix<f64>, k: &DVector<f64>) -> Result<HamiltonianEval> {
    let dims = model.dims();
    let (n, m, d) = (dims.n, dims.m, dims.d);
    if p.len() != m || q.shape() != (m, d) || k.len() != n {
        return Err(Error::ShapeMismatch {
            what: "hamiltonian multipliers (p, q, k)".into(),
            expected: (m, n),
            found: (p.len(), k.len()),
        });
    }
    let b = model.drift(t, node, vars)?;
    let s = model.diffusion(t, node, vars)?;
    let f = model.generator(t, node, vars)?;
    let l = model.running_cost(t, node, vars)?;
    let value = b.dot(p) + s.dot(q) - f.dot(k) - l;
    let bj = model.drift_jacobian(t, node, vars)?;
    let sj = model.diffusion_jacobian(t, node, vars)?;
    let fj = model.generator_jacobian(t, node, vars)?;
    let lj = model.running_cost_gradient(t, node, vars)?;
    let grad_u = hamiltonian_gradient(&bj.u, &sj.u, &fj.u, &lj.u, p, q, k, m, d);
    Ok(HamiltonianEval { value, grad_u })
}

#[allow(clippy::too_many_arguments)]
fn hamiltonian_gradient(
    bu: &DMatrix<f64>,
    su: &DMatrix<f64>,
    fu: &DMatrix<f64>,
    lu: &DMatrix<f64>,
    p: &DVector<f64>,
    q: &DMatrix<f64>,
    k: &DVector<f64>,
    m: usize,
    d: usize,
) -> DVector<f64> {
    let mut g = bu.transpose() * p - fu.transpose() * k - lu.row(0).transpose();
    for i in 0..d {
        g += su.rows(i * m, m).transpose() * q.column(i);
    }
    g
}

/// `H_u` along a trajectory at every `(t, node)` with `t < T`.
pub fn hamiltonian_gradients(model: &Model, lin: &Linearization, adj: &AdjointSolution) -> AdaptedProcess {
    let tree = model.tree();
    let dims = model.dims();
    AdaptedProcess::from_fn(tree, dims.r, 1, tree.horizon(), |t, a| {
        let j = lin.at(t, a);
        let g = hamiltonian_gradient(
            &j.b.u,
            &j.s.u,
            &j.f.u,
            &j.l.u,
            &adj.p.vector(t, a),
            &adj.q.matrix(t, a),
            &adj.k.vector(t, a),
            dims.m,
            dims.d,
        );
        g.as_slice().to_vec()
    })
}

/// `H` itself along a trajectory (used by reports).
pub fn hamiltonian_values(model: &Model, traj: &FbsdeSolution, u: &AdaptedProcess, adj: &AdjointSolution) -> Result<AdaptedProcess> {
    let tree = model.tree();
    let mut out = AdaptedProcess::zeros(tree, 1, 1, tree.horizon());
    for t in 0..tree.horizon() {
        for a in 0..tree.level_size(t) {
            let (x, y, z, uu) = trajectory_vars(model, traj, u, t, a);
            let v = Vars { x: &x, y: &y, z: &z, u: &uu };
            let h = hamiltonian(model, t, a, &v, &adj.p.vector(t, a), &adj.q.matrix(t, a), &adj.k.vector(t, a))?;
            out.set(t, a, &[h.value]);
        }
    }
    Ok(out)
}

/// Per-component position of a control inside its box.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActiveCode {
    Interior,
    Lower,
    Upper,
    /// `lower = upper`.
    Fixed,
}

impl ActiveCode {
    pub fn letter(self) -> char {
        match self {
            ActiveCode::Interior => 'I',
            ActiveCode::Lower => 'L',
            ActiveCode::Upper => 'U',
            ActiveCode::Fixed => 'F',
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpRow {
    pub t: usize,
    pub node: usize,
    /// Largest componentwise violation of the sign pattern at this node.
    pub violation: f64,
    pub active: Vec<ActiveCode>,
}

impl MpRow {
    pub fn active_string(&self) -> String {
        self.active.iter().map(|c| c.letter()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpReport {
    pub rows: Vec<MpRow>,
    pub max_violation: f64,
    pub location: Option<(usize, usize)>,
    pub tol: f64,
    pub passed: bool,
}

/// Bound test with a relative slack so that clamped values register as
/// active.
fn at_bound(value: f64, bound: f64) -> bool {
    bound.is_finite() && (value - bound).abs() <= 1e-12 * bound.abs().max(1.0)
}

/// First-order optimality of `u` given `grad_h = H_u` on `t < T`.
///
/// Since `⟨H_u, v - ū⟩` is affine in `v`, its supremum over a box is
/// attained at a vertex and reduces to the componentwise pattern:
/// `H_u ≤ 0` at a lower bound, `≥ 0` at an upper bound, `= 0` inside.
pub fn check_maximum_principle(model: &Model, u: &AdaptedProcess, grad_h: &AdaptedProcess, tol: f64) -> MpReport {
    let tree = model.tree();
    let mut rows = Vec::new();
    let mut worst = 0.0_f64;
    let mut location = None;
    for t in 0..tree.horizon() {
        let bx = model.control_box(t);
        for a in 0..tree.level_size(t) {
            let uu = u.slice(t, a);
            let g = grad_h.slice(t, a);
            let mut violation = 0.0_f64;
            let mut active = Vec::with_capacity(uu.len());
            for j in 0..uu.len() {
                let (lo, hi) = (bx.lower[j], bx.upper[j]);
                let (code, v) = if lo == hi {
                    (ActiveCode::Fixed, 0.0)
                } else if at_bound(uu[j], lo) {
                    (ActiveCode::Lower, g[j].max(0.0))
                } else if at_bound(uu[j], hi) {
                    (ActiveCode::Upper, (-g[j]).max(0.0))
                } else {
                    (ActiveCode::Interior, g[j].abs())
                };
                violation = violation.max(v);
                active.push(code);
            }
            if violation > worst {
                worst = violation;
                location = Some((t, a));
            }
            rows.push(MpRow {
                t,
                node: a,
                violation,
                active,
            });
        }
    }
    MpReport {
        rows,
        max_violation: worst,
        location,
        tol,
        passed: worst <= tol,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualityReport {
    /// First-order cost change from the variational processes (without
    /// the `l_u` term).
    pub lhs: f64,
    /// `-ε E⟨b_u^* p_s + Σ σ_iu^* q_s e_i - f_u^* k_s, Δv⟩`.
    pub rhs: f64,
    pub gap: f64,
}

/// Compares the variational pairing with the adjoint pairing at time `s`.
pub fn duality_check(model: &Model, u: &AdaptedProcess, pert: &Perturbation, cfg: &SolverConfig) -> Result<DualityReport> {
    let tree = model.tree();
    let traj = crate::fbsde::solve_state(model, u, cfg)?;
    let lin = Linearization::new(model, &traj, u)?;
    let adj = solve_adjoint_with(model, &lin, cfg)?;
    let var = solve_variational_with(model, &lin, pert, cfg)?;
    let (lhs, _) = first_order_cost(model, &lin, &var, pert);
    let dims = model.dims();
    let s = pert.s;
    let mut rhs = 0.0;
    for a in 0..tree.level_size(s) {
        let j = lin.at(s, a);
        // H_u without the l_u term
        let mut g = j.b.u.transpose() * adj.p.vector(s, a) - j.f.u.transpose() * adj.k.vector(s, a);
        let qs = adj.q.matrix(s, a);
        for i in 0..dims.d {
            g += j.s.u.rows(i * dims.m, dims.m).transpose() * qs.column(i);
        }
        rhs -= pert.eps * tree.node_probability(s, a) * g.dot(&pert.dv[a]);
    }
    Ok(DualityReport {
        lhs,
        rhs,
        gap: (lhs - rhs).abs(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fbsde::{solve_partially_coupled, solve_state};
    use crate::linear::{random_forward_only, random_partial, LinearProblem};
    use crate::problem::{ControlBox, Dims};
    use crate::tree::{path_process, IncrementDistribution, ScenarioTree};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar() -> LinearProblem {
        LinearProblem::zeros(Dims { n: 1, m: 1, d: 1, r: 1 }, Coupling::Partial)
    }

    fn adjoint_of(p: &LinearProblem, tree: &ScenarioTree) -> (AdjointSolution, FbsdeSolution) {
        let model = Model::new(p, tree).unwrap();
        let u = model.zero_control();
        let traj = solve_partially_coupled(&model, &u).unwrap();
        (solve_adjoint_partial(&model, &traj, &u).unwrap(), traj)
    }

    #[test]
    fn linear_terminal_cost_gives_constant_p() {
        let tree = ScenarioTree::product(3, IncrementDistribution::trinomial(1)).unwrap();
        let mut p = scalar();
        p.hc[0] = 1.0;
        let (adj, traj) = adjoint_of(&p, &tree);
        for t in 0..=3 {
            assert!(adj.p.level(t).iter().all(|v| (v + 1.0).abs() < 1e-15));
        }
        assert_eq!(adj.q.sup_norm(), 0.0);
        assert_eq!(adj.k.sup_norm(), 0.0);
        let model = Model::new(&p, &tree).unwrap();
        let (pe, qe) = explicit_classical_adjoint(&model, &traj.x, &model.zero_control()).unwrap();
        assert!(pe.sup_distance(&adj.p) < 1e-15 && qe.sup_norm() == 0.0);
    }

    #[test]
    fn quadratic_terminal_cost() {
        // h = x², X = W: p_{T-1} = -2 W_{T-1}, q_{T-1} = -2
        let tree = ScenarioTree::product(3, IncrementDistribution::rademacher(1)).unwrap();
        let mut p = scalar();
        p.s0[0] = 1.0;
        p.hq[(0, 0)] = 2.0;
        let model = Model::new(&p, &tree).unwrap();
        let traj = solve_partially_coupled(&model, &model.zero_control()).unwrap();
        let (pe, qe) = explicit_classical_adjoint(&model, &traj.x, &model.zero_control()).unwrap();
        let w = path_process(&tree);
        for a in 0..tree.level_size(2) {
            assert!((pe.slice(2, a)[0] + 2.0 * w.slice(2, a)[0]).abs() < 1e-14);
            assert!((qe.slice(2, a)[0] + 2.0).abs() < 1e-14);
        }
        let (adj, _) = adjoint_of(&p, &tree);
        assert!(adj.p.sup_distance(&pe) < 1e-12 && adj.q.sup_distance(&qe) < 1e-12);
    }

    #[test]
    fn running_cost_in_y_ramps_k() {
        let tree = ScenarioTree::product(4, IncrementDistribution::rademacher(1)).unwrap();
        let mut p = scalar();
        p.cy[0] = 1.0;
        let (adj, _) = adjoint_of(&p, &tree);
        for t in 0..=4 {
            assert!(adj.k.level(t).iter().all(|v| (v - t as f64).abs() < 1e-14), "t={t}");
        }
    }

    #[test]
    fn explicit_matches_solver_on_forward_only_problems() {
        let tree = ScenarioTree::product(3, IncrementDistribution::trinomial(2)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..5 {
            let p = random_forward_only(&mut rng, Dims { n: 1, m: 2, d: 2, r: 2 });
            let model = Model::new(&p, &tree).unwrap();
            let u = AdaptedProcess::from_fn(&tree, 2, 1, 4, |t, a| vec![0.1 * t as f64, -0.05 * a as f64]);
            let traj = solve_partially_coupled(&model, &u).unwrap();
            let adj = solve_adjoint_partial(&model, &traj, &u).unwrap();
            let (pe, qe) = explicit_classical_adjoint(&model, &traj.x, &u).unwrap();
            assert!(adj.p.sup_distance(&pe) <= 1e-12);
            assert!(adj.q.sup_distance(&qe) <= 1e-12);
        }
        let p = random_partial(&mut rng, Dims { n: 1, m: 2, d: 2, r: 2 }, false);
        let model = Model::new(&p, &tree).unwrap();
        let traj = solve_partially_coupled(&model, &model.zero_control()).unwrap();
        assert!(matches!(
            explicit_classical_adjoint(&model, &traj.x, &model.zero_control()),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn adjoint_residuals_and_orthogonality() {
        let tree = ScenarioTree::product(3, IncrementDistribution::trinomial(2)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = random_partial(&mut rng, Dims { n: 2, m: 2, d: 2, r: 1 }, true);
        let model = Model::new(&p, &tree).unwrap();
        let u = model.zero_control();
        let traj = solve_partially_coupled(&model, &u).unwrap();
        let lin = Linearization::new(&model, &traj, &u).unwrap();
        let adj = solve_adjoint_with(&model, &lin, &SolverConfig::default()).unwrap();
        assert_eq!(adj.k.slice(0, 0), &[0.0, 0.0]);
        assert!(adjoint_residuals(&model, &lin, &adj).unwrap().max() <= 1e-12);
        assert!(tree.check_strong_orthogonality(&adj.big_q, 1e-12).passed);
    }

    #[test]
    fn hamiltonian_examples() {
        let tree = ScenarioTree::product(2, IncrementDistribution::rademacher(1)).unwrap();
        let mut p = scalar();
        p.bu[(0, 0)] = 1.0;
        p.s0[0] = 0.4;
        p.qu[(0, 0)] = 2.0;
        let model = Model::new(&p, &tree).unwrap();
        let (pv, qv, kv) = (DVector::from_element(1, 0.7), DMatrix::from_element(1, 1, 0.3), DVector::from_element(1, -0.2));
        let u = [0.25];
        let v = Vars { x: &[0.1], y: &[0.0], z: &[0.0], u: &u };
        let h = hamiltonian(&model, 0, 0, &v, &pv, &qv, &kv).unwrap();
        assert!((h.grad_u[0] - (0.7 - 2.0 * 0.25)).abs() < 1e-15);
        assert!((h.value - (0.25 * 0.7 + 0.4 * 0.3 - 0.0625)).abs() < 1e-15);

        let zero = scalar();
        let model = Model::new(&zero, &tree).unwrap();
        let h = hamiltonian(&model, 0, 0, &v, &pv, &qv, &kv).unwrap();
        assert_eq!(h.value, 0.0);
        assert_eq!(h.grad_u[0], 0.0);
    }

    #[test]
    fn hamiltonian_gradient_matches_finite_differences() {
        let tree = ScenarioTree::product(2, IncrementDistribution::trinomial(2)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = random_partial(&mut rng, Dims { n: 2, m: 2, d: 2, r: 3 }, true);
        let model = Model::new(&p, &tree).unwrap();
        let pv = DVector::from_vec(vec![0.3, -1.1]);
        let qv = DMatrix::from_vec(2, 2, vec![0.5, 0.2, -0.7, 0.9]);
        let kv = DVector::from_vec(vec![-0.4, 0.6]);
        let (x, y, z) = ([0.2, -0.3], [0.5, 0.1], [0.3, -0.2, 0.4, 0.05]);
        let u = [0.1, -0.6, 0.8];
        let at = |u: &[f64]| hamiltonian(&model, 1, 2, &Vars { x: &x, y: &y, z: &z, u }, &pv, &qv, &kv).unwrap();
        let g = at(&u).grad_u;
        let h = 1e-5;
        for j in 0..3 {
            let (mut up, mut dn) = (u, u);
            up[j] += h;
            dn[j] -= h;
            let fd = (at(&up).value - at(&dn).value) / (2.0 * h);
            assert!((fd - g[j]).abs() < 1e-8, "j={j}: {fd} vs {}", g[j]);
        }
    }

    #[test]
    fn mp_check_single_point_box_always_passes() {
        let tree = ScenarioTree::product(2, IncrementDistribution::rademacher(1)).unwrap();
        let mut p = LinearProblem::scalar_lq();
        p.bounds = ControlBox::new(vec![0.5], vec![0.5]).unwrap();
        let model = Model::new(&p, &tree).unwrap();
        let u = AdaptedProcess::constant(&tree, &[0.5], 3);
        let grad = AdaptedProcess::constant(&tree, &[7.0], 2);
        let r = check_maximum_principle(&model, &u, &grad, 1e-12);
        assert!(r.passed);
        assert!(r.rows.iter().all(|row| row.active_string() == "F"));
    }

    #[test]
    fn mp_sign_pattern() {
        let tree = ScenarioTree::product(1, IncrementDistribution::rademacher(1)).unwrap();
        let mut p = scalar();
        p.bounds = ControlBox::new(vec![-1.0], vec![1.0]).unwrap();
        let model = Model::new(&p, &tree).unwrap();
        let check = |u: f64, g: f64| {
            let uu = AdaptedProcess::constant(&tree, &[u], 2);
            let gg = AdaptedProcess::constant(&tree, &[g], 1);
            check_maximum_principle(&model, &uu, &gg, 1e-9)
        };
        assert!(check(-1.0, -0.5).passed);
        assert_eq!(check(-1.0, 0.5).max_violation, 0.5);
        assert!(check(1.0, 0.5).passed);
        assert_eq!(check(1.0, -0.25).max_violation, 0.25);
        assert_eq!(check(0.0, -0.1).max_violation, 0.1);
        assert_eq!(check(0.0, -0.1).location, Some((0, 0)));
        assert_eq!(check(1.0, 0.5).rows[0].active_string(), "U");
    }

    #[test]
    fn duality_holds_on_linear_problems() {
        let tree = ScenarioTree::product(3, IncrementDistribution::trinomial(2)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for tm in [false, true] {
            let p = random_partial(&mut rng, Dims { n: 2, m: 2, d: 2, r: 2 }, tm);
            let model = Model::new(&p, &tree).unwrap();
            let u = model.zero_control();
            let pert = Perturbation::uniform(&tree, 1, &[0.6, -0.4], 0.3);
            let r = duality_check(&model, &u, &pert, &SolverConfig::default()).unwrap();
            assert!(r.gap <= 1e-10 * (1.0 + r.lhs.abs()), "{r:?}");
            let zero = duality_check(&model, &u, &pert.with_eps(0.0), &SolverConfig::default()).unwrap();
            assert_eq!((zero.lhs, zero.rhs), (0.0, 0.0));
            let none = Perturbation::uniform(&tree, 1, &[0.0, 0.0], 0.3);
            let zero = duality_check(&model, &u, &none, &SolverConfig::default()).unwrap();
            assert_eq!((zero.lhs, zero.rhs), (0.0, 0.0));
        }
    }

    #[test]
    fn fully_coupled_adjoint() {
        let tree = ScenarioTree::product(3, IncrementDistribution::trinomial(1)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        // decoupled coefficients declared as fully coupled
        let p = random_partial(&mut rng, Dims { n: 1, m: 1, d: 1, r: 1 }, true);
        let partial = Model::new(&p, &tree).unwrap();
        let pf = LinearProblem { coupling: Coupling::Full, ..p.clone() };
        let full = Model::new(&pf, &tree).unwrap();
        let u = partial.zero_control();
        let cfg = SolverConfig::default();
        let a = solve_adjoint(&partial, &solve_state(&partial, &u, &cfg).unwrap(), &u, &cfg).unwrap();
        let traj = solve_state(&full, &u, &cfg).unwrap();
        let b = solve_adjoint_fully(&full, &traj, &u, &cfg).unwrap();
        assert!(a.p.sup_distance(&b.p) <= 1e-10 && a.k.sup_distance(&b.k) <= 1e-10);

        // Picard and Newton on the canonical example with costs
        let mut c = LinearProblem::canonical_monotone();
        c.qx[(0, 0)] = 1.0;
        c.cy[0] = 0.5;
        c.cz[0] = -0.3;
        c.hc[0] = 1.0;
        let model = Model::new(&c, &tree).unwrap();
        let traj = solve_state(&model, &u, &cfg).unwrap();
        let picard_cfg = SolverConfig { method: crate::fbsde::CoupledMethod::Picard, ..cfg };
        let newton_cfg = SolverConfig { method: crate::fbsde::CoupledMethod::Newton, ..cfg };
        let ap = solve_adjoint_fully(&model, &traj, &u, &picard_cfg).unwrap();
        let an = solve_adjoint_fully(&model, &traj, &u, &newton_cfg).unwrap();
        assert!(ap.p.sup_distance(&an.p) <= 1e-8 && ap.k.sup_distance(&an.k) <= 1e-8);

        let zero = LinearProblem::canonical_monotone();
        let model = Model::new(&zero, &tree).unwrap();
        let traj = solve_state(&model, &u, &cfg).unwrap();
        let adj = solve_adjoint_fully(&model, &traj, &u, &cfg).unwrap();
        assert_eq!(adj.p.sup_norm() + adj.q.sup_norm() + adj.k.sup_norm(), 0.0);
    }
}
