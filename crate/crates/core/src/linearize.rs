//! Coefficient Jacobians along a trajectory and the affine node-wise
//! systems built from them (adjoint and variational equations).

use nalgebra::{DMatrix, DVector};

use crate::error::Result;
use crate::fbsde::{control_at, FbsdeSolution, FbsdeSystem};
use crate::problem::{Coupling, Jacobian, Model, Vars};
use crate::tree::AdaptedProcess;

/// Partials of `b`, `σ`, `f`, `l` at one node of the trajectory.
#[derive(Debug, Clone)]
pub struct NodeJacobians {
    pub b: Jacobian,
    /// Rows are `vec σ`, i.e. row `i·m + j` is component `j` of `σ_i`.
    pub s: Jacobian,
    pub f: Jacobian,
    /// Single row.
    pub l: Jacobian,
}

/// Jacobians at every node for `t = 0..=T`, plus `h_x` and `Φ_x` at the
/// leaves.
#[derive(Debug, Clone)]
pub struct Linearization {
    pub nodes: Vec<Vec<NodeJacobians>>,
    pub h_x: Vec<DVector<f64>>,
    pub phi_x: Vec<DMatrix<f64>>,
}

/// `(x, y, z, u)` of the trajectory at a node; `z` and `u` are zero where
/// they are not stored.
pub(crate) fn trajectory_vars(model: &Model, traj: &FbsdeSolution, u: &AdaptedProcess, t: usize, node: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let dims = model.dims();
    let z = if t < traj.z.times() {
        traj.z.slice(t, node).to_vec()
    } else {
        vec![0.0; dims.n * dims.d]
    };
    let uu = control_at(u, t, node);
    let uu = if uu.is_empty() { vec![0.0; dims.r] } else { uu.to_vec() };
    (traj.x.slice(t, node).to_vec(), traj.y.slice(t, node).to_vec(), z, uu)
}

impl Linearization {
    pub fn new(model: &Model, traj: &FbsdeSolution, u: &AdaptedProcess) -> Result<Self> {
        let tree = model.tree();
        let horizon = tree.horizon();
        let mut nodes = Vec::with_capacity(horizon + 1);
        for t in 0..=horizon {
            let mut level = Vec::with_capacity(tree.level_size(t));
            for a in 0..tree.level_size(t) {
                let (x, y, z, uu) = trajectory_vars(model, traj, u, t, a);
                let v = Vars { x: &x, y: &y, z: &z, u: &uu };
                level.push(NodeJacobians {
                    b: model.drift_jacobian(t, a, &v)?,
                    s: model.diffusion_jacobian(t, a, &v)?,
                    f: model.generator_jacobian(t, a, &v)?,
                    l: model.running_cost_gradient(t, a, &v)?,
                });
            }
            nodes.push(level);
        }
        let leaves = tree.level_size(horizon);
        let mut h_x = Vec::with_capacity(leaves);
        let mut phi_x = Vec::with_capacity(leaves);
        for a in 0..leaves {
            let x = traj.x.slice(horizon, a);
            h_x.push(model.terminal_cost_gradient(a, x)?);
            phi_x.push(model.terminal_value_jacobian(a, x)?);
        }
        Ok(Linearization { nodes, h_x, phi_x })
    }

    pub fn at(&self, t: usize, node: usize) -> &NodeJacobians {
        &self.nodes[t][node]
    }
}

/// A system whose coefficients are affine in the stacked argument
/// `[x | y | vec z]` at every node.
#[derive(Debug, Clone)]
pub struct AffineSystem {
    m: usize,
    n: usize,
    d: usize,
    initial: DVector<f64>,
    decoupled: bool,
    /// For `t < T`: rows `[drift (m); vec σ (m·d)]`.
    fwd: Vec<Vec<(DMatrix<f64>, DVector<f64>)>>,
    /// For `t = 0..=T` (level 0 unused): `n` rows.
    gen: Vec<Vec<(DMatrix<f64>, DVector<f64>)>>,
    /// Per leaf: `n × m` matrix and constant.
    term: Vec<(DMatrix<f64>, DVector<f64>)>,
}

fn stack_args(x: &[f64], y: &[f64], z: &[f64]) -> DVector<f64> {
    DVector::from_iterator(x.len() + y.len() + z.len(), x.iter().chain(y).chain(z).copied())
}

impl FbsdeSystem for AffineSystem {
    fn forward_dim(&self) -> usize {
        self.m
    }
    fn backward_dim(&self) -> usize {
        self.n
    }
    fn noise_dim(&self) -> usize {
        self.d
    }
    fn initial(&self) -> DVector<f64> {
        self.initial.clone()
    }
    fn forward(&self, t: usize, node: usize, x: &[f64], y: &[f64], z: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let (mat, c) = &self.fwd[t][node];
        let v = mat * stack_args(x, y, z) + c;
        let drift = v.rows(0, self.m).into_owned();
        let diffusion = DMatrix::from_column_slice(self.m, self.d, &v.as_slice()[self.m..]);
        Ok((drift, diffusion))
    }
    fn generator(&self, t: usize, node: usize, x: &[f64], y: &[f64], z: &[f64]) -> Result<DVector<f64>> {
        let (mat, c) = &self.gen[t][node];
        Ok(mat * stack_args(x, y, z) + c)
    }
    fn terminal(&self, node: usize, x: &[f64]) -> Result<DVector<f64>> {
        let (mat, c) = &self.term[node];
        Ok(mat * DVector::from_column_slice(x) + c)
    }
    fn decoupled(&self) -> bool {
        self.decoupled
    }
    fn forward_jacobian(&self, t: usize, node: usize, _: &[f64], _: &[f64], _: &[f64]) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let (mat, _) = &self.fwd[t][node];
        Ok((
            mat.rows(0, self.m).into_owned(),
            mat.rows(self.m, self.m * self.d).into_owned(),
        ))
    }
    fn generator_jacobian(&self, t: usize, node: usize, _: &[f64], _: &[f64], _: &[f64]) -> Result<DMatrix<f64>> {
        Ok(self.gen[t][node].0.clone())
    }
    fn terminal_jacobian(&self, node: usize, _: &[f64]) -> Result<DMatrix<f64>> {
        Ok(self.term[node].0.clone())
    }
}

/// Copies `blocks` side by side into a matrix with `rows` rows.
fn hcat(rows: usize, blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let cols = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut c = 0;
    for b in blocks {
        out.view_mut((0, c), (rows, b.ncols())).copy_from(b);
        c += b.ncols();
    }
    out
}

/// Adjoint system with forward state `k` (`n`), backward `p` (`m`) and
/// `q` (`m × d`):
///
/// ```text
/// Δk_t = -H_y(t) - Σ_i H_{z_i}(t) ΔW^i,           k_0 = 0
/// Δp_t = -H_x(t+1) + q_t ΔW_t + ΔQ_t,   p_T = -h_x - Φ_x^* (I + f_y(T)^*) k_T
/// ```
///
/// with `H = b^* p + Σ σ_i^* q e_i - f^* k - l`. Under partial coupling the
/// `b_y, b_z, σ_y, σ_z` terms vanish and `k` no longer reads `(p, q)`.
pub fn adjoint_system(model: &Model, lin: &Linearization) -> AffineSystem {
    let tree = model.tree();
    let dims = model.dims();
    let (n, m, d) = (dims.n, dims.m, dims.d);
    let horizon = tree.horizon();
    let mut fwd = Vec::with_capacity(horizon);
    for t in 0..horizon {
        let level = (0..tree.level_size(t))
            .map(|a| {
                let j = lin.at(t, a);
                let sig_y = |jj: usize| j.s.y.rows(jj * m, m).into_owned();
                let sig_z = |jj: usize, i: usize| j.s.z.view((jj * m, i * n), (m, n)).into_owned();
                let mut mat = DMatrix::zeros(n * (1 + d), n + m + m * d);
                let mut c = DVector::zeros(n * (1 + d));
                // drift: -H_y = f_y^* k - b_y^* p - Σ_j σ_{jy}^* q_j + l_y
                let mut blocks = vec![j.f.y.transpose(), -j.b.y.transpose()];
                for jj in 0..d {
                    blocks.push(-sig_y(jj).transpose());
                }
                mat.rows_mut(0, n).copy_from(&hcat(n, &blocks));
                c.rows_mut(0, n).copy_from(&j.l.y.row(0).transpose());
                // diffusion column i: -H_{z_i}
                for i in 0..d {
                    let fz = j.f.z.columns(i * n, n).into_owned();
                    let bz = j.b.z.columns(i * n, n).into_owned();
                    let mut blocks = vec![fz.transpose(), -bz.transpose()];
                    for jj in 0..d {
                        blocks.push(-sig_z(jj, i).transpose());
                    }
                    mat.rows_mut(n + i * n, n).copy_from(&hcat(n, &blocks));
                    c.rows_mut(n + i * n, n).copy_from(&j.l.z.columns(i * n, n).row(0).transpose());
                }
                (mat, c)
            })
            .collect();
        fwd.push(level);
    }
    let mut gen = Vec::with_capacity(horizon + 1);
    for t in 0..=horizon {
        let level = (0..tree.level_size(t))
            .map(|a| {
                let j = lin.at(t, a);
                // H_x = b_x^* p + Σ_j σ_{jx}^* q_j - f_x^* k - l_x
                let mut blocks = vec![-j.f.x.transpose(), j.b.x.transpose()];
                for jj in 0..d {
                    blocks.push(j.s.x.rows(jj * m, m).transpose());
                }
                (hcat(m, &blocks), -j.l.x.row(0).transpose())
            })
            .collect();
        gen.push(level);
    }
    let term = (0..tree.level_size(horizon))
        .map(|a| {
            // η_T enters both the terminal pairing and f(T), hence I + f_y(T)
            let fy = &lin.at(horizon, a).f.y;
            let mat = -(lin.phi_x[a].transpose() * (DMatrix::identity(n, n) + fy.transpose()));
            (mat, -&lin.h_x[a])
        })
        .collect();
    AffineSystem {
        m: n,
        n: m,
        d,
        initial: DVector::zeros(n),
        decoupled: model.coupling() == Coupling::Partial,
        fwd,
        gen,
        term,
    }
}

/// Variational system for the perturbation `u_s += ε Δv` (with `scaled_dv`
/// already multiplied by `ε`, one vector per time-`s` node):
///
/// ```text
/// Δξ_t = b_x ξ + b_y η + b_z ζ + δ_ts b_u εΔv + Σ_i [σ_ix ξ + σ_iy η + σ_iz ζ + δ_ts σ_iu εΔv] ΔW^i
/// Δη_t = -(f_x ξ + f_y η + f_z ζ + δ_(t+1)s f_u εΔv)(t+1) + ζ_t ΔW_t + ΔV_t
/// ξ_0 = 0,  η_T = Φ_x ξ_T
/// ```
pub fn variational_system(model: &Model, lin: &Linearization, s: usize, scaled_dv: &[DVector<f64>]) -> AffineSystem {
    let tree = model.tree();
    let dims = model.dims();
    let (n, m, d) = (dims.n, dims.m, dims.d);
    let horizon = tree.horizon();
    let fwd = (0..horizon)
        .map(|t| {
            (0..tree.level_size(t))
                .map(|a| {
                    let j = lin.at(t, a);
                    let mut mat = DMatrix::zeros(m * (1 + d), m + n + n * d);
                    mat.rows_mut(0, m).copy_from(&hcat(m, &[j.b.x.clone(), j.b.y.clone(), j.b.z.clone()]));
                    mat.rows_mut(m, m * d).copy_from(&hcat(m * d, &[j.s.x.clone(), j.s.y.clone(), j.s.z.clone()]));
                    let mut c = DVector::zeros(m * (1 + d));
                    if t == s {
                        c.rows_mut(0, m).copy_from(&(&j.b.u * &scaled_dv[a]));
                        c.rows_mut(m, m * d).copy_from(&(&j.s.u * &scaled_dv[a]));
                    }
                    (mat, c)
                })
                .collect()
        })
        .collect();
    let gen = (0..=horizon)
        .map(|t| {
            (0..tree.level_size(t))
                .map(|a| {
                    let j = lin.at(t, a);
                    let mat = hcat(n, &[j.f.x.clone(), j.f.y.clone(), j.f.z.clone()]);
                    let c = if t == s { &j.f.u * &scaled_dv[a] } else { DVector::zeros(n) };
                    (mat, c)
                })
                .collect()
        })
        .collect();
    let term = (0..tree.level_size(horizon))
        .map(|a| (lin.phi_x[a].clone(), DVector::zeros(n)))
        .collect();
    AffineSystem {
        m,
        n,
        d,
        initial: DVector::zeros(m),
        decoupled: model.coupling() == Coupling::Partial,
        fwd,
        gen,
        term,
    }
}
