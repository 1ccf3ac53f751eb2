//! Single-time convex perturbations `u^ε = ū + δ_ts ε Δv`, the variational
//! equations and the ε-scaling experiment.

use log::warn;
use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::fbsde::{solve_state, solve_system, SolverConfig};
use crate::linearize::{variational_system, Linearization};
use crate::monotone::linearized_violation;
use crate::optimizer::cost_along;
use crate::problem::{Coupling, Model};
use crate::tree::{AdaptedProcess, ScenarioTree};

/// Perturbation at time `s` in direction `Δv` (one `r`-vector per time-`s`
/// node) with size `ε`.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    pub s: usize,
    pub dv: Vec<DVector<f64>>,
    pub eps: f64,
}

impl Perturbation {
    /// The same direction at every time-`s` node.
    pub fn uniform(tree: &ScenarioTree, s: usize, dv: &[f64], eps: f64) -> Self {
        let size = if s <= tree.horizon() { tree.level_size(s) } else { 0 };
        Perturbation {
            s,
            dv: vec![DVector::from_column_slice(dv); size],
            eps,
        }
    }

    pub fn with_eps(&self, eps: f64) -> Self {
        Perturbation { eps, ..self.clone() }
    }

    /// `ε Δv` per node.
    pub fn scaled(&self) -> Vec<DVector<f64>> {
        self.dv.iter().map(|v| v * self.eps).collect()
    }

    fn validate(&self, model: &Model) -> Result<()> {
        let tree = model.tree();
        if self.s >= tree.horizon() {
            return Err(Error::TimeOutOfRange {
                t: self.s,
                max: tree.horizon() - 1,
            });
        }
        if self.dv.len() != tree.level_size(self.s) {
            return Err(Error::ShapeMismatch {
                what: "perturbation direction".into(),
                expected: (tree.level_size(self.s), model.dims().r),
                found: (self.dv.len(), self.dv.first().map_or(0, |v| v.len())),
            });
        }
        if let Some(v) = self.dv.iter().find(|v| v.len() != model.dims().r) {
            return Err(Error::ShapeMismatch {
                what: "perturbation direction".into(),
                expected: (tree.level_size(self.s), model.dims().r),
                found: (self.dv.len(), v.len()),
            });
        }
        if !(self.eps >= 0.0 && self.eps.is_finite()) || !self.dv.iter().flatten().all(|v| v.is_finite()) {
            return Err(Error::Precondition(format!("perturbation size must be finite and ≥ 0 (got {})", self.eps)));
        }
        Ok(())
    }
}

/// `u^ε`, after checking that both `ū_s + Δv` and `ū_s + εΔv` lie in `U_s`.
pub fn perturb_control(model: &Model, u: &AdaptedProcess, pert: &Perturbation) -> Result<AdaptedProcess> {
    pert.validate(model)?;
    let s = pert.s;
    let bx = model.control_box(s);
    let mut out = u.clone();
    for (a, dv) in pert.dv.iter().enumerate() {
        let base = DVector::from_column_slice(u.slice(s, a));
        for candidate in [&base + dv, &base + dv * pert.eps] {
            if let Some((j, value)) = bx.violation(candidate.as_slice()) {
                return Err(Error::Infeasible {
                    t: s,
                    node: a,
                    component: j,
                    value,
                    lower: bx.lower[j],
                    upper: bx.upper[j],
                });
            }
        }
        if pert.eps != 0.0 {
            out.set(s, a, (base + dv * pert.eps).as_slice());
        }
    }
    Ok(out)
}

/// Solution of the variational equations.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalSolution {
    /// `m`-vectors on `t = 0..=T`, `ξ_0 = 0`.
    pub xi: AdaptedProcess,
    /// `n`-vectors on `t = 0..=T`.
    pub eta: AdaptedProcess,
    /// `n × d` on `t = 0..T`.
    pub zeta: AdaptedProcess,
    /// Orthogonal remainder.
    pub v: AdaptedProcess,
}

/// Variational equations along `traj` under `ū`.
pub fn solve_variational(model: &Model, traj: &crate::fbsde::FbsdeSolution, u: &AdaptedProcess, pert: &Perturbation, cfg: &SolverConfig) -> Result<VariationalSolution> {
    let lin = Linearization::new(model, traj, u)?;
    solve_variational_with(model, &lin, pert, cfg)
}

pub fn solve_variational_with(model: &Model, lin: &Linearization, pert: &Perturbation, cfg: &SolverConfig) -> Result<VariationalSolution> {
    pert.validate(model)?;
    if model.coupling() == Coupling::Full {
        let v = linearized_violation(model, lin);
        if v > 0.0 {
            warn!("linearized coefficients violate the monotone condition by {v:.3e}; solving anyway");
        }
    }
    let sys = variational_system(model, lin, pert.s, &pert.scaled());
    let sol = solve_system(model.tree(), &sys, cfg)?;
    Ok(VariationalSolution {
        xi: sol.x,
        eta: sol.y,
        zeta: sol.z,
        v: sol.n,
    })
}

/// `(E Σ_t ⟨l_x, ξ⟩ + ⟨l_y, η⟩ + Σ_i ⟨l_{z_i}, ζ e_i⟩ + E⟨h_x, ξ_T⟩, ε E⟨l_u(s), Δv⟩)`.
pub fn first_order_cost(model: &Model, lin: &Linearization, var: &VariationalSolution, pert: &Perturbation) -> (f64, f64) {
    let tree = model.tree();
    let horizon = tree.horizon();
    let mut lhs = 0.0;
    for t in 0..horizon {
        for a in 0..tree.level_size(t) {
            let l = &lin.at(t, a).l;
            let dot = |row: &nalgebra::DMatrix<f64>, v: &[f64]| row.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
            let term = dot(&l.x, var.xi.slice(t, a)) + dot(&l.y, var.eta.slice(t, a)) + dot(&l.z, var.zeta.slice(t, a));
            lhs += tree.node_probability(t, a) * term;
        }
    }
    for a in 0..tree.level_size(horizon) {
        lhs += tree.node_probability(horizon, a) * lin.h_x[a].dot(&var.xi.vector(horizon, a));
    }
    let s = pert.s;
    let lu: f64 = (0..tree.level_size(s))
        .map(|a| {
            let row = lin.at(s, a).l.u.row(0).transpose();
            tree.node_probability(s, a) * pert.eps * row.dot(&pert.dv[a])
        })
        .sum();
    (lhs, lu)
}

/// One rung of the ε ladder.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalingRow {
    pub eps: f64,
    /// `sup_t E|X^ε - X̄|²` and the `Y`, `Z` analogues.
    pub a_x: f64,
    pub a_y: f64,
    pub a_z: f64,
    /// `sup_t E|X^ε - X̄ - ξ|²` and the `η`, `ζ` analogues.
    pub b_x: f64,
    pub b_y: f64,
    pub b_z: f64,
    /// `|J(u^ε) - J(ū) - first-order expansion|`.
    pub cost_remainder: f64,
}

/// Log-log slopes; `None` when fewer than two usable points remain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalingSlopes {
    pub a_x: Option<f64>,
    pub a_y: Option<f64>,
    pub a_z: Option<f64>,
    pub b_x: Option<f64>,
    pub b_y: Option<f64>,
    pub b_z: Option<f64>,
    pub cost_remainder: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingReport {
    pub rows: Vec<ScalingRow>,
    pub slopes: ScalingSlopes,
}

/// Values below this are treated as exact zeros when fitting slopes.
pub const NOISE_FLOOR: f64 = 1e-24;
/// Number of trailing ladder points used in the fit.
pub const FIT_POINTS: usize = 5;

/// Default ladder `2^-1 .. 2^-8`.
pub fn default_ladder() -> Vec<f64> {
    (1..=8).map(|k| 0.5_f64.powi(k)).collect()
}

/// Least-squares slope of `log y` against `log ε` over the last
/// [`FIT_POINTS`] points, skipping values under [`NOISE_FLOOR`].
pub fn fit_slope(eps: &[f64], values: &[f64]) -> Option<f64> {
    let start = eps.len().saturating_sub(FIT_POINTS);
    let pts: Vec<(f64, f64)> = eps[start..]
        .iter()
        .zip(&values[start..])
        .filter(|(_, v)| **v >= NOISE_FLOOR && v.is_finite())
        .map(|(e, v)| (e.ln(), v.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Some(sxy / sxx)
}

/// Runs the exact perturbed system and the variational approximation over
/// `ladder`, a decreasing sequence of `ε`, with direction from `template`
/// (its own `eps` is ignored).
pub fn epsilon_scaling_experiment(model: &Model, u: &AdaptedProcess, template: &Perturbation, ladder: &[f64], cfg: &SolverConfig) -> Result<ScalingReport> {
    if ladder.is_empty() || ladder.windows(2).any(|w| !(w[1] < w[0])) || ladder.iter().any(|e| !(*e > 0.0)) {
        return Err(Error::Precondition("ε ladder must be positive and strictly decreasing".into()));
    }
    let tree = model.tree();
    let base = solve_state(model, u, cfg)?;
    let lin = Linearization::new(model, &base, u)?;
    let j0 = cost_along(model, &base, u)?;
    let mut rows = Vec::with_capacity(ladder.len());
    for &eps in ladder {
        let pert = template.with_eps(eps);
        let ue = perturb_control(model, u, &pert)?;
        let sol = solve_state(model, &ue, cfg)?;
        let var = solve_variational_with(model, &lin, &pert, cfg)?;
        let dx = sol.x.difference(&base.x);
        let dy = sol.y.difference(&base.y);
        let dz = sol.z.difference(&base.z);
        let (lhs, lu) = first_order_cost(model, &lin, &var, &pert);
        let je = cost_along(model, &sol, &ue)?;
        rows.push(ScalingRow {
            eps,
            a_x: dx.sup_mean_square(tree),
            a_y: dy.sup_mean_square(tree),
            a_z: dz.sup_mean_square(tree),
            b_x: dx.difference(&var.xi).sup_mean_square(tree),
            b_y: dy.difference(&var.eta).sup_mean_square(tree),
            b_z: dz.difference(&var.zeta).sup_mean_square(tree),
            cost_remainder: (je - j0 - lhs - lu).abs(),
        });
    }
    let eps: Vec<f64> = rows.iter().map(|r| r.eps).collect();
    let col = |f: fn(&ScalingRow) -> f64| fit_slope(&eps, &rows.iter().map(f).collect::<Vec<_>>());
    let slopes = ScalingSlopes {
        a_x: col(|r| r.a_x),
        a_y: col(|r| r.a_y),
        a_z: col(|r| r.a_z),
        b_x: col(|r| r.b_x),
        b_y: col(|r| r.b_y),
        b_z: col(|r| r.b_z),
        cost_remainder: col(|r| r.cost_remainder),
    };
    Ok(ScalingReport { rows, slopes })
}
