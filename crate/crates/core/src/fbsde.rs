//! Coupled forward-backward difference systems
//!
//! ```text
//! ΔX_t = b(t, X_t, Y_t, Z_t) + σ(t, X_t, Y_t, Z_t) ΔW_t,   X_0 = x0
//! ΔY_t = -f(t+1, X_{t+1}, Y_{t+1}, Z_{t+1}) + Z_t ΔW_t + ΔN_t,   Y_T = g(X_T)
//! ```
//!
//! The same machinery solves the controlled state equations, the adjoint
//! equations and the variational equations; each of those is an
//! [`FbsdeSystem`].

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::problem::{Coupling, Model, Vars};
use crate::sde::{accumulate_increments, roll_forward, solve_bsde};
use crate::tree::{AdaptedProcess, ScenarioTree};

/// A forward-backward system on a tree. Slices are column-major; `z` is
/// `n × d`. Jacobians are taken with respect to the stacked argument
/// `[x | y | vec(z)]` and default to central differences.
pub trait FbsdeSystem {
    fn forward_dim(&self) -> usize;
    fn backward_dim(&self) -> usize;
    fn noise_dim(&self) -> usize;
    fn initial(&self) -> DVector<f64>;
    /// Drift (`m`) and diffusion (`m × d`) at `t < T`.
    fn forward(&self, t: usize, node: usize, x: &[f64], y: &[f64], z: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)>;
    /// Generator at `t = 1..=T`; `z` is zero at `T`.
    fn generator(&self, t: usize, node: usize, x: &[f64], y: &[f64], z: &[f64]) -> Result<DVector<f64>>;
    fn terminal(&self, node: usize, x: &[f64]) -> Result<DVector<f64>>;
    /// True when the forward part ignores `(y, z)`.
    fn decoupled(&self) -> bool {
        false
    }

    /// Jacobians of the drift (`m` rows) and of `vec(σ)` (`m·d` rows).
    fn forward_jacobian(&self, t: usize, node: usize, x: &[f64], y: &[f64], z: &[f64]) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let m = self.forward_dim();
        let stacked = fd_columns(x, y, z, |xs, ys, zs| {
            let (b, s) = self.forward(t, node, xs, ys, zs)?;
            Ok(b.iter().chain(s.iter()).copied().collect())
        })?;
        let rows = stacked.nrows();
        Ok((stacked.rows(0, m).into_owned(), stacked.rows(m, rows - m).into_owned()))
    }

    fn generator_jacobian(&self, t: usize, node: usize, x: &[f64], y: &[f64], z: &[f64]) -> Result<DMatrix<f64>> {
        fd_columns(x, y, z, |xs, ys, zs| Ok(self.generator(t, node, xs, ys, zs)?.as_slice().to_vec()))
    }

    fn terminal_jacobian(&self, node: usize, x: &[f64]) -> Result<DMatrix<f64>> {
        fd_columns(x, &[], &[], |xs, _, _| Ok(self.terminal(node, xs)?.as_slice().to_vec()))
    }
}

/// Central differences over the stacked argument `[x | y | z]`.
fn fd_columns<F>(x: &[f64], y: &[f64], z: &[f64], eval: F) -> Result<DMatrix<f64>>
where
    F: Fn(&[f64], &[f64], &[f64]) -> Result<Vec<f64>>,
{
    let mut buf = [x.to_vec(), y.to_vec(), z.to_vec()];
    let cols = x.len() + y.len() + z.len();
    let mut out: Option<DMatrix<f64>> = None;
    let mut col = 0;
    for slot in 0..3 {
        for j in 0..buf[slot].len() {
            let base = buf[slot][j];
            let h = crate::problem::FD_STEP * base.abs().max(1.0);
            buf[slot][j] = base + h;
            let plus = eval(&buf[0], &buf[1], &buf[2])?;
            buf[slot][j] = base - h;
            let minus = eval(&buf[0], &buf[1], &buf[2])?;
            buf[slot][j] = base;
            let m = out.get_or_insert_with(|| DMatrix::zeros(plus.len(), cols));
            for (i, (a, b)) in plus.iter().zip(&minus).enumerate() {
                m[(i, col)] = (a - b) / (2.0 * h);
            }
            col += 1;
        }
    }
    match out {
        Some(m) => Ok(m),
        None => {
            let rows = eval(x, y, z)?.len();
            Ok(DMatrix::zeros(rows, 0))
        }
    }
}

/// Solution of a forward-backward system.
#[derive(Debug, Clone, PartialEq)]
pub struct FbsdeSolution {
    /// Forward state on `t = 0..=T`.
    pub x: AdaptedProcess,
    /// Backward state on `t = 0..=T`.
    pub y: AdaptedProcess,
    /// `n × d` on `t = 0..T`.
    pub z: AdaptedProcess,
    /// Orthogonal martingale part on `t = 0..=T`, `N_0 = 0`.
    pub n: AdaptedProcess,
}

/// Largest node-wise residual of each equation of a solution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Residuals {
    pub initial: f64,
    pub forward: f64,
    pub backward: f64,
    pub terminal: f64,
    /// Strong orthogonality of `N` to `W`.
    pub orthogonality: f64,
}

impl Residuals {
    pub fn max(&self) -> f64 {
        self.initial
            .max(self.forward)
            .max(self.backward)
            .max(self.terminal)
            .max(self.orthogonality)
    }
}

fn zeros_z(sys: &dyn FbsdeSystem) -> Vec<f64> {
    vec![0.0; sys.backward_dim() * sys.noise_dim()]
}

/// Z slice at a node, zeros at `T`.
fn z_slice<'a>(z: &'a AdaptedProcess, t: usize, node: usize, zero: &'a [f64]) -> &'a [f64] {
    if t < z.times() {
        z.slice(t, node)
    } else {
        zero
    }
}

/// Re-checks every equation of `sol` edge by edge.
pub fn residuals(tree: &ScenarioTree, sys: &dyn FbsdeSystem, sol: &FbsdeSolution) -> Result<Residuals> {
    let horizon = tree.horizon();
    let zero = zeros_z(sys);
    let initial = (sol.x.vector(0, 0) - sys.initial()).amax();
    let mut forward = 0.0_f64;
    let mut backward = 0.0_f64;
    for t in 0..horizon {
        for a in 0..tree.level_size(t) {
            let (x, y, z) = (sol.x.slice(t, a), sol.y.slice(t, a), sol.z.slice(t, a));
            let (b, s) = sys.forward(t, a, x, y, z)?;
            let zt = sol.z.matrix(t, a);
            for k in 0..tree.branching(t) {
                let c = tree.child(t, a, k);
                let dw = DVector::from_column_slice(tree.increment(t, k));
                let rf = sol.x.vector(t + 1, c) - sol.x.vector(t, a) - &b - &s * &dw;
                forward = forward.max(rf.amax());
                let f = sys.generator(t + 1, c, sol.x.slice(t + 1, c), sol.y.slice(t + 1, c), z_slice(&sol.z, t + 1, c, &zero))?;
                let rb = sol.y.vector(t + 1, c) - sol.y.vector(t, a) + f - &zt * &dw - (sol.n.vector(t + 1, c) - sol.n.vector(t, a));
                backward = backward.max(rb.amax());
            }
        }
    }
    let mut terminal = 0.0_f64;
    for a in 0..tree.level_size(horizon) {
        let g = sys.terminal(a, sol.x.slice(horizon, a))?;
        terminal = terminal.max((sol.y.vector(horizon, a) - g).amax());
    }
    let orthogonality = tree.check_strong_orthogonality(&sol.n, 0.0).max_residual;
    Ok(Residuals {
        initial,
        forward,
        backward,
        terminal,
        orthogonality,
    })
}

fn roll(tree: &ScenarioTree, sys: &dyn FbsdeSystem, y: &AdaptedProcess, z: &AdaptedProcess) -> Result<AdaptedProcess> {
    let x0 = sys.initial();
    roll_forward(tree, x0.as_slice(), |t, a, x| sys.forward(t, a, x.as_slice(), y.slice(t, a), z.slice(t, a)))
}

fn backward_given(tree: &ScenarioTree, sys: &dyn FbsdeSystem, x: &AdaptedProcess) -> Result<crate::sde::BsdeSolution> {
    let horizon = tree.horizon();
    let eta = (0..tree.level_size(horizon))
        .map(|a| sys.terminal(a, x.slice(horizon, a)))
        .collect::<Result<Vec<_>>>()?;
    let gen = |t: usize, a: usize, y: &DVector<f64>, z: &DMatrix<f64>| sys.generator(t, a, x.slice(t, a), y.as_slice(), z.as_slice());
    solve_bsde(tree, &gen, &eta)
}

/// Forward sweep followed by one backward sweep; exact when the system is
/// decoupled.
pub fn solve_decoupled(tree: &ScenarioTree, sys: &dyn FbsdeSystem) -> Result<FbsdeSolution> {
    if !sys.decoupled() {
        return Err(Error::Precondition("system is coupled; use the Picard or Newton solver".into()));
    }
    let (n, d) = (sys.backward_dim(), sys.noise_dim());
    let y = AdaptedProcess::zeros(tree, n, 1, tree.horizon() + 1);
    let z = AdaptedProcess::zeros(tree, n, d, tree.horizon());
    let x = roll(tree, sys, &y, &z)?;
    let bs = backward_given(tree, sys, &x)?;
    Ok(FbsdeSolution { x, y: bs.y, z: bs.z, n: bs.n })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PicardConfig {
    pub tol: f64,
    pub max_iter: usize,
    /// Relaxation weight `θ ∈ (0, 1]` on the backward iterate.
    pub damping: f64,
    /// Halve `θ` when the fixed-point gap keeps growing (plain iteration
    /// only).
    pub adaptive: bool,
    /// Anderson mixing depth; `0` gives the plain damped iteration.
    pub anderson: usize,
    /// Allow `d > 1` for fully coupled problems.
    pub allow_multidim: bool,
}

impl Default for PicardConfig {
    fn default() -> Self {
        PicardConfig {
            tol: 1e-10,
            max_iter: 500,
            damping: 0.5,
            adaptive: true,
            anderson: 20,
            allow_multidim: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PicardOutcome {
    pub solution: FbsdeSolution,
    /// Fixed-point gap `sup |Φ(Y, Z) - (Y, Z)|` per iteration.
    pub trace: Vec<f64>,
    pub iterations: usize,
    /// Damping in force when the iteration stopped.
    pub damping: f64,
}

/// Anderson mixing over the last few iterates of a fixed-point map.
struct Anderson {
    depth: usize,
    beta: f64,
    prev: Option<(DVector<f64>, DVector<f64>)>,
    df: Vec<DVector<f64>>,
    dg: Vec<DVector<f64>>,
}

impl Anderson {
    fn new(depth: usize, beta: f64) -> Self {
        Anderson {
            depth,
            beta,
            prev: None,
            df: Vec::new(),
            dg: Vec::new(),
        }
    }

    fn reset(&mut self) {
        self.prev = None;
        self.df.clear();
        self.dg.clear();
    }

    /// Next iterate from `x` and `g = Φ(x)`.
    fn step(&mut self, x: &DVector<f64>, g: &DVector<f64>) -> DVector<f64> {
        let f = g - x;
        if let Some((fp, gp)) = self.prev.take() {
            self.df.push(&f - fp);
            self.dg.push(g - gp);
            if self.df.len() > self.depth {
                self.df.remove(0);
                self.dg.remove(0);
            }
        }
        self.prev = Some((f.clone(), g.clone()));
        let mut next = x + &f * self.beta;
        if self.df.is_empty() {
            return next;
        }
        let big_f = DMatrix::from_columns(&self.df);
        let gamma = match big_f.clone().svd(true, true).solve(&f, 1e-12 * big_f.norm()) {
            Ok(g) if g.iter().all(|v| v.is_finite()) => g,
            _ => return next,
        };
        for (j, gj) in gamma.iter().enumerate() {
            // ΔX + βΔF with ΔX = ΔG - ΔF
            let dx = &self.dg[j] - &self.df[j];
            next -= (dx + &self.df[j] * self.beta) * *gj;
        }
        next
    }
}

fn stack_yz(y: &AdaptedProcess, z: &AdaptedProcess) -> DVector<f64> {
    let mut v = y.flatten();
    v.extend(z.flatten());
    DVector::from_vec(v)
}

fn unstack_yz(v: &DVector<f64>, y: &mut AdaptedProcess, z: &mut AdaptedProcess) {
    let ny = y.flatten().len();
    y.assign_flat(&v.as_slice()[..ny]);
    z.assign_flat(&v.as_slice()[ny..]);
}

/// Damped fixed-point iteration `(Y, Z) → X → (Y', Z')`, optionally with
/// Anderson mixing.
///
/// Stops once the undamped gap `sup |(Y', Z') - (Y, Z)|` drops below `tol`;
/// the returned backward part is `(Y', Z', N')`, so the backward equation
/// holds exactly and the forward one up to the gap.
pub fn picard(tree: &ScenarioTree, sys: &dyn FbsdeSystem, cfg: &PicardConfig, guess: Option<(&AdaptedProcess, &AdaptedProcess)>) -> Result<PicardOutcome> {
    if !(cfg.damping > 0.0 && cfg.damping <= 1.0) {
        return Err(Error::Precondition(format!("damping {} not in (0, 1]", cfg.damping)));
    }
    let (n, d) = (sys.backward_dim(), sys.noise_dim());
    let horizon = tree.horizon();
    let (mut y, mut z) = match guess {
        Some((y, z)) => (y.clone(), z.clone()),
        None => (
            AdaptedProcess::zeros(tree, n, 1, horizon + 1),
            AdaptedProcess::zeros(tree, n, d, horizon),
        ),
    };
    if sys.decoupled() {
        let solution = solve_decoupled(tree, sys)?;
        return Ok(PicardOutcome {
            solution,
            trace: vec![0.0],
            iterations: 1,
            damping: cfg.damping,
        });
    }
    let mut theta = cfg.damping;
    let mut trace = Vec::new();
    let mut growth = 0;
    let mut best = f64::INFINITY;
    let mut mixer = (cfg.anderson > 0).then(|| Anderson::new(cfg.anderson, cfg.damping));
    for iter in 1..=cfg.max_iter {
        let x = roll(tree, sys, &y, &z)?;
        let bs = backward_given(tree, sys, &x)?;
        let gap = y.sup_distance(&bs.y).max(z.sup_distance(&bs.z));
        trace.push(gap);
        debug!("picard iteration {iter}: gap {gap:.3e}, theta {theta}");
        if !gap.is_finite() {
            break;
        }
        if gap < cfg.tol {
            return Ok(PicardOutcome {
                solution: FbsdeSolution { x, y: bs.y, z: bs.z, n: bs.n },
                trace,
                iterations: iter,
                damping: theta,
            });
        }
        if let Some(mixer) = mixer.as_mut() {
            // a blow-up means the mixing history went stale
            if gap > 1e4 * best {
                mixer.reset();
            }
            best = best.min(gap);
            let next = mixer.step(&stack_yz(&y, &z), &stack_yz(&bs.y, &bs.z));
            unstack_yz(&next, &mut y, &mut z);
            continue;
        }
        if trace.len() >= 2 && gap > trace[trace.len() - 2] {
            growth += 1;
        } else {
            growth = 0;
        }
        if cfg.adaptive && growth >= 3 && theta > 1e-3 {
            theta *= 0.5;
            growth = 0;
            warn!("picard gap growing; damping reduced to {theta}");
        }
        y.relax_towards(&bs.y, theta);
        z.relax_towards(&bs.z, theta);
    }
    Err(Error::NotConverged {
        iterations: trace.len(),
        last_change: trace.last().copied().unwrap_or(f64::NAN),
        trace,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonConfig {
    /// Target sup-norm of the stacked residual.
    pub tol: f64,
    pub max_iter: usize,
    /// Cap on the total entry count of `X, Y, Z, N`.
    pub max_unknowns: usize,
    pub allow_multidim: bool,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        NewtonConfig {
            tol: 1e-10,
            max_iter: 50,
            max_unknowns: 20_000,
            allow_multidim: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NewtonOutcome {
    pub solution: FbsdeSolution,
    /// Residual sup-norm before each step and after the last one.
    pub trace: Vec<f64>,
    pub iterations: usize,
}

/// Index layout of the stacked unknowns `(X, Y, Z)`.
struct Layout {
    m: usize,
    n: usize,
    d: usize,
    x_off: Vec<usize>,
    y_off: Vec<usize>,
    z_off: Vec<usize>,
    total: usize,
}

impl Layout {
    fn new(tree: &ScenarioTree, m: usize, n: usize, d: usize) -> Self {
        let horizon = tree.horizon();
        let mut off = 0;
        let mut x_off = Vec::new();
        for t in 0..=horizon {
            x_off.push(off);
            off += m * tree.level_size(t);
        }
        let mut y_off = Vec::new();
        for t in 0..=horizon {
            y_off.push(off);
            off += n * tree.level_size(t);
        }
        let mut z_off = Vec::new();
        for t in 0..horizon {
            z_off.push(off);
            off += n * d * tree.level_size(t);
        }
        Layout { m, n, d, x_off, y_off, z_off, total: off }
    }

    fn x(&self, t: usize, a: usize) -> usize {
        self.x_off[t] + a * self.m
    }
    fn y(&self, t: usize, a: usize) -> usize {
        self.y_off[t] + a * self.n
    }
    fn z(&self, t: usize, a: usize) -> usize {
        self.z_off[t] + a * self.n * self.d
    }
}

/// Stacked residual and, optionally, its Jacobian. Row blocks mirror the
/// unknown blocks: forward edges on the `X` rows, `Y_t - E[F | F_t]` on the
/// `Y` rows (terminal condition at `T`) and `Z_t - E[F ΔW^* | F_t]` on the
/// `Z` rows, with `F = Y_{t+1} + f(t+1, ·)`.
fn stacked(tree: &ScenarioTree, sys: &dyn FbsdeSystem, lay: &Layout, v: &[f64], jac: Option<&mut DMatrix<f64>>) -> Result<DVector<f64>> {
    let (m, n, d) = (lay.m, lay.n, lay.d);
    let horizon = tree.horizon();
    let nd = n * d;
    let zero = vec![0.0; nd];
    let mut r = DVector::zeros(lay.total);
    let mut jac = jac;
    if let Some(j) = jac.as_deref_mut() {
        j.fill(0.0);
    }
    let x0 = sys.initial();
    for i in 0..m {
        r[lay.x(0, 0) + i] = v[lay.x(0, 0) + i] - x0[i];
        if let Some(j) = jac.as_deref_mut() {
            j[(lay.x(0, 0) + i, lay.x(0, 0) + i)] = 1.0;
        }
    }
    for t in 0..horizon {
        let step = tree.step(t);
        for a in 0..tree.level_size(t) {
            let (xa, ya, za) = (lay.x(t, a), lay.y(t, a), lay.z(t, a));
            let (xs, ys, zs) = (&v[xa..xa + m], &v[ya..ya + n], &v[za..za + nd]);
            let (b, s) = sys.forward(t, a, xs, ys, zs)?;
            let fj = match jac {
                Some(_) => Some(sys.forward_jacobian(t, a, xs, ys, zs)?),
                None => None,
            };
            // backward rows at (t, a)
            for i in 0..n {
                r[ya + i] = v[ya + i];
            }
            for i in 0..nd {
                r[za + i] = v[za + i];
            }
            if let Some(j) = jac.as_deref_mut() {
                for i in 0..n {
                    j[(ya + i, ya + i)] = 1.0;
                }
                for i in 0..nd {
                    j[(za + i, za + i)] = 1.0;
                }
            }
            for k in 0..step.len() {
                let c = tree.child(t, a, k);
                let w = step.atom(k);
                let p = step.prob(k);
                let (xc, yc) = (lay.x(t + 1, c), lay.y(t + 1, c));
                let zc = if t + 1 < horizon { Some(lay.z(t + 1, c)) } else { None };
                // forward edge
                for i in 0..m {
                    let mut val = v[xc + i] - v[xa + i] - b[i];
                    for (jn, wj) in w.iter().enumerate() {
                        val -= s[(i, jn)] * wj;
                    }
                    r[xc + i] = val;
                }
                if let (Some(j), Some((jb, js))) = (jac.as_deref_mut(), fj.as_ref()) {
                    for i in 0..m {
                        j[(xc + i, xc + i)] += 1.0;
                        j[(xc + i, xa + i)] -= 1.0;
                        for col in 0..jb.ncols() {
                            let mut dv = jb[(i, col)];
                            for (jn, wj) in w.iter().enumerate() {
                                dv += js[(jn * m + i, col)] * wj;
                            }
                            let target = stacked_column(lay, col, xa, ya, za);
                            j[(xc + i, target)] -= dv;
                        }
                    }
                }
                // F at the child
                let zcs: &[f64] = match zc {
                    Some(o) => &v[o..o + nd],
                    None => &zero,
                };
                let f = sys.generator(t + 1, c, &v[xc..xc + m], &v[yc..yc + n], zcs)?;
                for i in 0..n {
                    let fi = v[yc + i] + f[i];
                    r[ya + i] -= p * fi;
                    for (jn, wj) in w.iter().enumerate() {
                        r[za + jn * n + i] -= p * wj * fi;
                    }
                }
                if let Some(j) = jac.as_deref_mut() {
                    let gj = sys.generator_jacobian(t + 1, c, &v[xc..xc + m], &v[yc..yc + n], zcs)?;
                    for i in 0..n {
                        // dF_i = dY_i + gj row
                        let mut add = |col: usize, val: f64| {
                            j[(ya + i, col)] -= p * val;
                            for (jn, wj) in w.iter().enumerate() {
                                j[(za + jn * n + i, col)] -= p * wj * val;
                            }
                        };
                        add(yc + i, 1.0);
                        for col in 0..gj.ncols() {
                            let val = gj[(i, col)];
                            if val == 0.0 {
                                continue;
                            }
                            if col >= m + n && zc.is_none() {
                                continue;
                            }
                            let target = stacked_column(lay, col, xc, yc, zc.unwrap_or(0));
                            add(target, val);
                        }
                    }
                }
            }
        }
    }
    for a in 0..tree.level_size(horizon) {
        let (xa, ya) = (lay.x(horizon, a), lay.y(horizon, a));
        let g = sys.terminal(a, &v[xa..xa + m])?;
        for i in 0..n {
            r[ya + i] = v[ya + i] - g[i];
        }
        if let Some(j) = jac.as_deref_mut() {
            let gj = sys.terminal_jacobian(a, &v[xa..xa + m])?;
            for i in 0..n {
                j[(ya + i, ya + i)] = 1.0;
                for col in 0..m {
                    j[(ya + i, xa + col)] -= gj[(i, col)];
                }
            }
        }
    }
    if !r.iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite {
            what: "stacked residual",
            t: 0,
            node: 0,
        });
    }
    Ok(r)
}

/// Maps a column of a local `[x | y | z]` Jacobian to a stacked index.
fn stacked_column(lay: &Layout, col: usize, xo: usize, yo: usize, zo: usize) -> usize {
    if col < lay.m {
        xo + col
    } else if col < lay.m + lay.n {
        yo + col - lay.m
    } else {
        zo + col - lay.m - lay.n
    }
}

fn unpack(tree: &ScenarioTree, sys: &dyn FbsdeSystem, lay: &Layout, v: &[f64]) -> Result<FbsdeSolution> {
    let (m, n, d) = (lay.m, lay.n, lay.d);
    let horizon = tree.horizon();
    let nd = n * d;
    let x = AdaptedProcess::from_fn(tree, m, 1, horizon + 1, |t, a| v[lay.x(t, a)..lay.x(t, a) + m].to_vec());
    let y = AdaptedProcess::from_fn(tree, n, 1, horizon + 1, |t, a| v[lay.y(t, a)..lay.y(t, a) + n].to_vec());
    let z = AdaptedProcess::from_fn(tree, n, d, horizon, |t, a| v[lay.z(t, a)..lay.z(t, a) + nd].to_vec());
    let mut big_n = AdaptedProcess::zeros(tree, n, 1, horizon + 1);
    let zero = vec![0.0; nd];
    for t in 0..horizon {
        for a in 0..tree.level_size(t) {
            let yt = y.vector(t, a);
            let zt = z.matrix(t, a);
            for k in 0..tree.branching(t) {
                let c = tree.child(t, a, k);
                let f = sys.generator(t + 1, c, x.slice(t + 1, c), y.slice(t + 1, c), z_slice(&z, t + 1, c, &zero))?;
                let dw = DVector::from_column_slice(tree.increment(t, k));
                let dn = y.vector(t + 1, c) + f - &yt - &zt * dw;
                big_n.set(t + 1, c, dn.as_slice());
            }
        }
    }
    accumulate_increments(tree, &mut big_n);
    Ok(FbsdeSolution { x, y, z, n: big_n })
}

/// Entry count of `X, Y, Z, N` on `tree`.
pub fn unknown_count(tree: &ScenarioTree, m: usize, n: usize, d: usize) -> usize {
    let nodes = tree.total_nodes();
    let internal = nodes - tree.level_size(tree.horizon());
    m * nodes + 2 * n * nodes + n * d * internal
}

/// Damped Newton on the stacked node-wise system with `N` eliminated.
pub fn newton(tree: &ScenarioTree, sys: &dyn FbsdeSystem, cfg: &NewtonConfig, guess: Option<&FbsdeSolution>) -> Result<NewtonOutcome> {
    let (m, n, d) = (sys.forward_dim(), sys.backward_dim(), sys.noise_dim());
    let count = unknown_count(tree, m, n, d);
    if count > cfg.max_unknowns {
        return Err(Error::TooManyUnknowns {
            unknowns: count,
            cap: cfg.max_unknowns,
        });
    }
    let lay = Layout::new(tree, m, n, d);
    let mut v = vec![0.0; lay.total];
    if let Some(g) = guess {
        for t in 0..=tree.horizon() {
            for a in 0..tree.level_size(t) {
                v[lay.x(t, a)..lay.x(t, a) + m].copy_from_slice(g.x.slice(t, a));
                v[lay.y(t, a)..lay.y(t, a) + n].copy_from_slice(g.y.slice(t, a));
                if t < tree.horizon() {
                    v[lay.z(t, a)..lay.z(t, a) + n * d].copy_from_slice(g.z.slice(t, a));
                }
            }
        }
    }
    let mut jac = DMatrix::zeros(lay.total, lay.total);
    let mut trace = Vec::new();
    for iter in 0..cfg.max_iter {
        let r = stacked(tree, sys, &lay, &v, Some(&mut jac))?;
        let norm = r.amax();
        trace.push(norm);
        debug!("newton iteration {iter}: residual {norm:.3e}");
        if norm <= cfg.tol {
            let solution = unpack(tree, sys, &lay, &v)?;
            return Ok(NewtonOutcome {
                solution,
                trace,
                iterations: iter,
            });
        }
        let lu = jac.clone().lu();
        let diag = lu.u().diagonal().map(f64::abs);
        let (hi, lo) = (diag.max(), diag.min());
        let cond = if lo > 0.0 { hi / lo } else { f64::INFINITY };
        let delta = match lu.solve(&(-&r)) {
            Some(dlt) if cond < 1e15 && dlt.iter().all(|x| x.is_finite()) => dlt,
            _ => return Err(Error::SingularJacobian { condition_estimate: cond }),
        };
        let mut lambda = 1.0;
        loop {
            let trial: Vec<f64> = v.iter().zip(delta.iter()).map(|(a, b)| a + lambda * b).collect();
            let accepted = match stacked(tree, sys, &lay, &trial, None) {
                Ok(rt) => rt.amax() <= (1.0 - 1e-4 * lambda) * norm || rt.amax() <= cfg.tol,
                Err(_) => false,
            };
            if accepted {
                v = trial;
                break;
            }
            lambda *= 0.5;
            if lambda < 1e-10 {
                return Err(Error::NewtonStalled {
                    iterations: iter + 1,
                    residual: norm,
                });
            }
        }
    }
    let r = stacked(tree, sys, &lay, &v, None)?;
    let norm = r.amax();
    trace.push(norm);
    if norm <= cfg.tol {
        let solution = unpack(tree, sys, &lay, &v)?;
        return Ok(NewtonOutcome {
            solution,
            trace,
            iterations: cfg.max_iter,
        });
    }
    Err(Error::NewtonStalled {
        iterations: cfg.max_iter,
        residual: norm,
    })
}

/// Control value at a node; zeros where `u` is not stored (e.g. `t = T`
/// for a control given on `0..T`).
pub(crate) fn control_at(u: &AdaptedProcess, t: usize, node: usize) -> &[f64] {
    const EMPTY: [f64; 0] = [];
    if t < u.times() {
        u.slice(t, node)
    } else {
        &EMPTY
    }
}

/// The controlled state equations of a problem under a fixed control.
pub struct ControlledSystem<'m, 'a> {
    pub model: &'m Model<'a>,
    pub u: &'m AdaptedProcess,
    zero_u: Vec<f64>,
}

impl<'m, 'a> ControlledSystem<'m, 'a> {
    pub fn new(model: &'m Model<'a>, u: &'m AdaptedProcess) -> Self {
        ControlledSystem {
            model,
            u,
            zero_u: vec![0.0; model.dims().r],
        }
    }

    fn u_at(&self, t: usize, node: usize) -> &[f64] {
        let s = control_at(self.u, t, node);
        if s.is_empty() {
            &self.zero_u
        } else {
            s
        }
    }
}

fn hstack(j: &crate::problem::Jacobian) -> DMatrix<f64> {
    let rows = j.x.nrows();
    let cols = j.x.ncols() + j.y.ncols() + j.z.ncols();
    let mut out = DMatrix::zeros(rows, cols);
    out.columns_mut(0, j.x.ncols()).copy_from(&j.x);
    out.columns_mut(j.x.ncols(), j.y.ncols()).copy_from(&j.y);
    out.columns_mut(j.x.ncols() + j.y.ncols(), j.z.ncols()).copy_from(&j.z);
    out
}

impl FbsdeSystem for ControlledSystem<'_, '_> {
    fn forward_dim(&self) -> usize {
        self.model.dims().m
    }
    fn backward_dim(&self) -> usize {
        self.model.dims().n
    }
    fn noise_dim(&self) -> usize {
        self.model.dims().d
    }
    fn initial(&self) -> DVector<f64> {
        self.model.initial_state()
    }
    fn forward(&self, t: usize, node: usize, x: &[f64], y: &[f64], z: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let v = Vars { x, y, z, u: self.u_at(t, node) };
        Ok((self.model.drift(t, node, &v)?, self.model.diffusion(t, node, &v)?))
    }
    fn generator(&self, t: usize, node: usize, x: &[f64], y: &[f64], z: &[f64]) -> Result<DVector<f64>> {
        let v = Vars { x, y, z, u: self.u_at(t, node) };
        self.model.generator(t, node, &v)
    }
    fn terminal(&self, node: usize, x: &[f64]) -> Result<DVector<f64>> {
        self.model.terminal_value(node, x)
    }
    fn decoupled(&self) -> bool {
        self.model.coupling() == Coupling::Partial
    }
    fn forward_jacobian(&self, t: usize, node: usize, x: &[f64], y: &[f64], z: &[f64]) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let v = Vars { x, y, z, u: self.u_at(t, node) };
        Ok((
            hstack(&self.model.drift_jacobian(t, node, &v)?),
            hstack(&self.model.diffusion_jacobian(t, node, &v)?),
        ))
    }
    fn generator_jacobian(&self, t: usize, node: usize, x: &[f64], y: &[f64], z: &[f64]) -> Result<DMatrix<f64>> {
        let v = Vars { x, y, z, u: self.u_at(t, node) };
        Ok(hstack(&self.model.generator_jacobian(t, node, &v)?))
    }
    fn terminal_jacobian(&self, node: usize, x: &[f64]) -> Result<DMatrix<f64>> {
        self.model.terminal_value_jacobian(node, x)
    }
}

fn require_coupling(model: &Model, want: Coupling) -> Result<()> {
    if model.coupling() != want {
        return Err(Error::Precondition(format!(
            "solver needs {want:?} coupling, problem is {:?}",
            model.coupling()
        )));
    }
    Ok(())
}

fn require_scalar_noise(model: &Model, allow: bool) -> Result<()> {
    if model.dims().d != 1 {
        if !allow {
            return Err(Error::Precondition(format!(
                "fully coupled solvers default to d = 1 (got d = {}); set allow_multidim to override",
                model.dims().d
            )));
        }
        warn!("fully coupled solve with d = {}", model.dims().d);
    }
    Ok(())
}

/// State trajectory of a partially coupled problem: forward rollout, then
/// one backward sweep.
pub fn solve_partially_coupled(model: &Model, u: &AdaptedProcess) -> Result<FbsdeSolution> {
    require_coupling(model, Coupling::Partial)?;
    model.check_admissible(u)?;
    solve_decoupled(model.tree(), &ControlledSystem::new(model, u))
}

pub fn solve_fully_coupled_picard(model: &Model, u: &AdaptedProcess, cfg: &PicardConfig) -> Result<PicardOutcome> {
    require_coupling(model, Coupling::Full)?;
    require_scalar_noise(model, cfg.allow_multidim)?;
    model.check_admissible(u)?;
    picard(model.tree(), &ControlledSystem::new(model, u), cfg, None)
}

pub fn solve_fully_coupled_newton(model: &Model, u: &AdaptedProcess, cfg: &NewtonConfig) -> Result<NewtonOutcome> {
    require_coupling(model, Coupling::Full)?;
    require_scalar_noise(model, cfg.allow_multidim)?;
    model.check_admissible(u)?;
    newton(model.tree(), &ControlledSystem::new(model, u), cfg, None)
}

/// How coupled systems are solved inside higher-level routines.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum CoupledMethod {
    Picard,
    Newton,
    /// Picard, falling back to Newton if Picard fails.
    #[default]
    PicardThenNewton,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SolverConfig {
    pub method: CoupledMethod,
    pub picard: PicardConfig,
    pub newton: NewtonConfig,
}

/// Solves any [`FbsdeSystem`] with the configured strategy.
pub fn solve_system(tree: &ScenarioTree, sys: &dyn FbsdeSystem, cfg: &SolverConfig) -> Result<FbsdeSolution> {
    if sys.decoupled() {
        return solve_decoupled(tree, sys);
    }
    match cfg.method {
        CoupledMethod::Picard => Ok(picard(tree, sys, &cfg.picard, None)?.solution),
        CoupledMethod::Newton => Ok(newton(tree, sys, &cfg.newton, None)?.solution),
        CoupledMethod::PicardThenNewton => match picard(tree, sys, &cfg.picard, None) {
            Ok(out) => Ok(out.solution),
            Err(e) => {
                warn!("picard failed ({e}); falling back to Newton");
                Ok(newton(tree, sys, &cfg.newton, None)?.solution)
            }
        },
    }
}

/// State trajectory for either coupling.
pub fn solve_state(model: &Model, u: &AdaptedProcess, cfg: &SolverConfig) -> Result<FbsdeSolution> {
    model.check_admissible(u)?;
    if model.coupling() == Coupling::Full {
        require_scalar_noise(model, cfg.picard.allow_multidim && cfg.newton.allow_multidim)?;
    }
    solve_system(model.tree(), &ControlledSystem::new(model, u), cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linear::{random_monotone, LinearProblem};
    use crate::problem::Dims;
    use crate::tree::{path_process, IncrementDistribution};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_partial() -> LinearProblem {
        LinearProblem::zeros(Dims { n: 1, m: 1, d: 1, r: 1 }, Coupling::Partial)
    }

    // E[value(s, ·) | node (t, a)] by walking every descendant path
    fn descend(tree: &ScenarioTree, t: usize, a: usize, s: usize, value: &dyn Fn(usize) -> f64) -> f64 {
        if t == s {
            return value(a);
        }
        let step = tree.step(t);
        (0..step.len()).map(|k| step.prob(k) * descend(tree, t + 1, tree.child(t, a, k), s, value)).sum()
    }

    #[test]
    fn controlled_brownian_state() {
        let tree = ScenarioTree::product(4, IncrementDistribution::trinomial(1)).unwrap();
        let mut p = scalar_partial();
        p.bu[(0, 0)] = 1.0;
        p.s0[0] = 1.0;
        let model = Model::new(&p, &tree).unwrap();
        let sol = solve_partially_coupled(&model, &model.zero_control()).unwrap();
        assert!(sol.x.sup_distance(&path_process(&tree)) < 1e-15);
        assert_eq!(sol.y.sup_norm(), 0.0);
        assert_eq!(sol.z.sup_norm(), 0.0);
    }

    #[test]
    fn generator_reading_x_matches_path_sums() {
        let tree = ScenarioTree::product(4, IncrementDistribution::trinomial(1)).unwrap();
        let mut p = scalar_partial();
        p.s0[0] = 1.0;
        p.fx[(0, 0)] = 1.0;
        let model = Model::new(&p, &tree).unwrap();
        let sol = solve_partially_coupled(&model, &model.zero_control()).unwrap();
        let w = path_process(&tree);
        for t in 0..=4 {
            for a in 0..tree.level_size(t) {
                let want: f64 = (t + 1..=4).map(|s| descend(&tree, t, a, s, &|b| w.slice(s, b)[0])).sum();
                assert!((sol.y.slice(t, a)[0] - want).abs() < 1e-12, "t={t} a={a}");
            }
        }
    }

    #[test]
    fn one_step_closed_form() {
        // T = 1: Y_0 = E[F], Z_0 = E[F ΔW] with F = (Φ(1 + f_y) + f_x) X_1 + (1 + f_y) y0
        let tree = ScenarioTree::product(1, IncrementDistribution::trinomial(1)).unwrap();
        let mut p = scalar_partial();
        p.x0[0] = 0.7;
        p.b0[0] = 0.2;
        p.s0[0] = 0.6;
        p.fx[(0, 0)] = 0.4;
        p.fy[(0, 0)] = -0.3;
        p.phi[(0, 0)] = 1.5;
        p.y0[0] = 0.25;
        let model = Model::new(&p, &tree).unwrap();
        let sol = solve_partially_coupled(&model, &model.zero_control()).unwrap();
        let c = 1.5 * 0.7 + 0.4;
        assert!((sol.y.slice(0, 0)[0] - (c * 0.9 + 0.7 * 0.25)).abs() < 1e-14);
        assert!((sol.z.slice(0, 0)[0] - c * 0.6).abs() < 1e-14);
    }

    #[test]
    fn picard_returns_at_once_when_decoupled() {
        let tree = ScenarioTree::product(3, IncrementDistribution::rademacher(1)).unwrap();
        let mut p = scalar_partial();
        p.s0[0] = 1.0;
        p.fx[(0, 0)] = 1.0;
        let model = Model::new(&p, &tree).unwrap();
        let u = model.zero_control();
        let out = picard(&tree, &ControlledSystem::new(&model, &u), &PicardConfig::default(), None).unwrap();
        assert_eq!(out.iterations, 1);
        let direct = solve_partially_coupled(&model, &u).unwrap();
        assert_eq!(out.solution, direct);
        let nw = newton(&tree, &ControlledSystem::new(&model, &u), &NewtonConfig::default(), None).unwrap();
        assert!(nw.solution.y.sup_distance(&direct.y) < 1e-10);
        assert!(nw.solution.z.sup_distance(&direct.z) < 1e-10);
    }

    #[test]
    fn canonical_monotone_picard_and_newton_agree() {
        let tree = ScenarioTree::product(4, IncrementDistribution::trinomial(1)).unwrap();
        let p = LinearProblem::canonical_monotone();
        let model = Model::new(&p, &tree).unwrap();
        let u = model.zero_control();
        let sys = ControlledSystem::new(&model, &u);
        let nw = solve_fully_coupled_newton(&model, &u, &NewtonConfig::default()).unwrap();
        assert!(residuals(&tree, &sys, &nw.solution).unwrap().max() <= 1e-10);
        let mut fixed_points = Vec::new();
        for damping in [1.0, 0.5] {
            let cfg = PicardConfig { damping, tol: 1e-11, ..Default::default() };
            let out = solve_fully_coupled_picard(&model, &u, &cfg).unwrap();
            assert!(residuals(&tree, &sys, &out.solution).unwrap().max() <= 1e-10);
            assert!(out.solution.y.sup_distance(&nw.solution.y) <= 1e-8);
            assert!(out.solution.x.sup_distance(&nw.solution.x) <= 1e-8);
            fixed_points.push(out.solution);
        }
        assert!(fixed_points[0].y.sup_distance(&fixed_points[1].y) <= 1e-9);
        // plain damped iteration needs the adaptive halving here
        for damping in [1.0, 0.5] {
            let plain = PicardConfig { damping, anderson: 0, adaptive: false, ..Default::default() };
            assert!(solve_fully_coupled_picard(&model, &u, &plain).is_err());
            let adaptive = PicardConfig { adaptive: true, ..plain };
            let out = solve_fully_coupled_picard(&model, &u, &adaptive).unwrap();
            assert!(out.damping < damping);
            assert!(out.solution.y.sup_distance(&nw.solution.y) <= 1e-8);
        }
    }

    #[test]
    fn one_step_full_coupling() {
        // X_1 = x0 - Y_0 + (s0 - Z_0) w, Y_1 = Φ X_1, f = x:
        // Y_0 = c x0 / (1 + c), Z_0 = c s0 / (1 + c) with c = Φ + 1
        let tree = ScenarioTree::product(1, IncrementDistribution::trinomial(1)).unwrap();
        let mut p = LinearProblem::canonical_monotone();
        p.phi[(0, 0)] = 0.5;
        p.s0[0] = 0.8;
        let model = Model::new(&p, &tree).unwrap();
        let nw = solve_fully_coupled_newton(&model, &model.zero_control(), &NewtonConfig::default()).unwrap();
        let c = 1.5;
        assert!((nw.solution.y.slice(0, 0)[0] - c / (1.0 + c)).abs() < 1e-12);
        assert!((nw.solution.z.slice(0, 0)[0] - c * 0.8 / (1.0 + c)).abs() < 1e-12);
    }

    #[test]
    fn random_monotone_cross_solver() {
        let tree = ScenarioTree::product(3, IncrementDistribution::trinomial(1)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let p = random_monotone(&mut rng, 2, 1, 0.2);
            let model = Model::new(&p, &tree).unwrap();
            let u = model.zero_control();
            let cfg = PicardConfig { tol: 1e-11, ..Default::default() };
            let pc = solve_fully_coupled_picard(&model, &u, &cfg).unwrap();
            let nw = solve_fully_coupled_newton(&model, &u, &NewtonConfig::default()).unwrap();
            assert!(pc.solution.y.sup_distance(&nw.solution.y) <= 1e-8);
            assert!(pc.solution.z.sup_distance(&nw.solution.z) <= 1e-8);
        }
    }

    #[test]
    fn fallback_to_newton_when_picard_diverges() {
        // a monotone instance on which plain damped Picard blows up
        let tree = ScenarioTree::product(3, IncrementDistribution::trinomial(1)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = (0..5).map(|i| random_monotone(&mut rng, 1 + i % 3, 1, 0.2)).last().unwrap();
        let model = Model::new(&p, &tree).unwrap();
        let u = model.zero_control();
        let cfg = PicardConfig { max_iter: 200, anderson: 0, ..Default::default() };
        assert!(matches!(solve_fully_coupled_picard(&model, &u, &cfg), Err(Error::NotConverged { .. })));
        let solver = SolverConfig { picard: cfg, ..Default::default() };
        let sol = solve_state(&model, &u, &solver).unwrap();
        assert!(residuals(&tree, &ControlledSystem::new(&model, &u), &sol).unwrap().max() <= 1e-10);
    }

    #[test]
    fn newton_cap_and_multidim_guard() {
        let tree = ScenarioTree::product(2, IncrementDistribution::trinomial(1)).unwrap();
        let p = LinearProblem::canonical_monotone();
        let model = Model::new(&p, &tree).unwrap();
        let cfg = NewtonConfig { max_unknowns: 10, ..Default::default() };
        let err = solve_fully_coupled_newton(&model, &model.zero_control(), &cfg).unwrap_err();
        assert!(matches!(err, Error::TooManyUnknowns { cap: 10, .. }));
        let tree2 = ScenarioTree::product(2, IncrementDistribution::rademacher(2)).unwrap();
        let mut p2 = LinearProblem::zeros(Dims { n: 1, m: 1, d: 2, r: 1 }, Coupling::Full);
        p2.by[(0, 0)] = -1.0;
        let model2 = Model::new(&p2, &tree2).unwrap();
        assert!(matches!(
            solve_fully_coupled_picard(&model2, &model2.zero_control(), &PicardConfig::default()),
            Err(Error::Precondition(_))
        ));
        let cfg = PicardConfig { allow_multidim: true, ..Default::default() };
        assert!(solve_fully_coupled_picard(&model2, &model2.zero_control(), &cfg).is_ok());
    }
}
