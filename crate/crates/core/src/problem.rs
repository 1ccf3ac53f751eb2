//! Control problem description and the evaluation layer that applies the
//! time conventions, checks shapes and finiteness, and supplies
//! central-difference partials when a problem has no analytic ones.
//!
//! Conventions: `b(T) = σ(T) = l(T) = 0` and `f(0) = 0`. The control is
//! stored on `t = 0..=T`; its time-`T` slot only feeds `f(T, ·)` and is kept
//! at zero by the solvers.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tree::{AdaptedProcess, ScenarioTree};

/// `n`: backward dimension, `m`: forward dimension, `d`: noise dimension,
/// `r`: control dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub n: usize,
    pub m: usize,
    pub d: usize,
    pub r: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Coupling {
    /// `b`, `σ` read only `(t, x, u)`.
    Partial,
    /// `b`, `σ` may read `(y, z)`; requires `m = n`.
    Full,
}

/// Arguments of a coefficient evaluation. `z` is `n × d` in column-major
/// order. Terminal functions see empty `y`, `z`, `u`.
#[derive(Debug, Clone, Copy)]
pub struct Point<'a> {
    pub t: usize,
    pub horizon: usize,
    pub node: usize,
    /// Path value `W_t` at the node.
    pub w: &'a [f64],
    pub x: &'a [f64],
    pub y: &'a [f64],
    pub z: &'a [f64],
    pub u: &'a [f64],
}

/// Partial derivatives of a vector-valued coefficient; every block has one
/// row per output component. The `z` block has `n·d` columns (column-major
/// `z`), and for `σ` the outputs are `vec(σ)`, also column-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Jacobian {
    pub x: DMatrix<f64>,
    pub y: DMatrix<f64>,
    pub z: DMatrix<f64>,
    pub u: DMatrix<f64>,
}

impl Jacobian {
    pub fn zeros(rows: usize, dims: &Dims, x_dim: usize) -> Self {
        Jacobian {
            x: DMatrix::zeros(rows, x_dim),
            y: DMatrix::zeros(rows, dims.n),
            z: DMatrix::zeros(rows, dims.n * dims.d),
            u: DMatrix::zeros(rows, dims.r),
        }
    }

    fn shape_ok(&self, rows: usize, dims: &Dims, x_dim: usize) -> bool {
        self.x.shape() == (rows, x_dim)
            && self.y.shape() == (rows, dims.n)
            && self.z.shape() == (rows, dims.n * dims.d)
            && self.u.shape() == (rows, dims.r)
    }

    fn is_finite(&self) -> bool {
        [&self.x, &self.y, &self.z, &self.u]
            .iter()
            .all(|m| m.iter().all(|v| v.is_finite()))
    }

    /// Columns of the `z` block belonging to `z e_i`.
    pub fn z_col(&self, n: usize, i: usize) -> DMatrix<f64> {
        self.z.columns(i * n, n).into_owned()
    }
}

/// Box `U_t = [lower, upper]`; entries may be infinite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl ControlBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::ShapeMismatch {
                what: "control box bounds".into(),
                expected: (lower.len(), 1),
                found: (upper.len(), 1),
            });
        }
        let b = ControlBox { lower, upper };
        b.validate()?;
        Ok(b)
    }

    pub fn unbounded(r: usize) -> Self {
        ControlBox {
            lower: vec![f64::NEG_INFINITY; r],
            upper: vec![f64::INFINITY; r],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (j, (&lo, &hi)) in self.lower.iter().zip(&self.upper).enumerate() {
            if lo.is_nan() || hi.is_nan() || lo > hi {
                return Err(Error::EmptyBox {
                    component: j,
                    lower: lo,
                    upper: hi,
                });
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn clamp(&self, u: &mut [f64]) {
        for (j, v) in u.iter_mut().enumerate() {
            *v = v.max(self.lower[j]).min(self.upper[j]);
        }
    }

    /// First component outside the box, as `(component, value)`.
    pub fn violation(&self, u: &[f64]) -> Option<(usize, f64)> {
        u.iter()
            .enumerate()
            .find(|(j, v)| !(**v >= self.lower[*j] && **v <= self.upper[*j]))
            .map(|(j, v)| (j, *v))
    }
}

/// A controlled forward-backward system with running and terminal cost.
///
/// Implementors only describe the coefficients; conventions, checks and
/// fallbacks live in [`Model`]. Jacobian hooks return `None` to request
/// central differences.
pub trait ControlProblem: Send + Sync {
    fn dims(&self) -> Dims;
    fn coupling(&self) -> Coupling;
    fn initial_state(&self) -> DVector<f64>;
    fn drift(&self, p: &Point) -> DVector<f64>;
    /// `m × d`, column `i` is `σ_i`.
    fn diffusion(&self, p: &Point) -> DMatrix<f64>;
    fn generator(&self, p: &Point) -> DVector<f64>;
    fn running_cost(&self, p: &Point) -> f64;
    fn terminal_cost(&self, p: &Point) -> f64;
    /// `y_T`, possibly a function of `X_T`.
    fn terminal_value(&self, p: &Point) -> DVector<f64>;
    fn control_box(&self, t: usize) -> ControlBox;

    fn drift_jacobian(&self, _p: &Point) -> Option<Jacobian> {
        None
    }
    fn diffusion_jacobian(&self, _p: &Point) -> Option<Jacobian> {
        None
    }
    fn generator_jacobian(&self, _p: &Point) -> Option<Jacobian> {
        None
    }
    /// Single-row Jacobian of `l`.
    fn running_cost_gradient(&self, _p: &Point) -> Option<Jacobian> {
        None
    }
    fn terminal_cost_gradient(&self, _p: &Point) -> Option<DVector<f64>> {
        None
    }
    /// `n × m` Jacobian of `y_T` in `x`.
    fn terminal_value_jacobian(&self, _p: &Point) -> Option<DMatrix<f64>> {
        None
    }
}

/// Slices bound to `x, y, z, u` at one node.
#[derive(Debug, Clone, Copy)]
pub struct Vars<'a> {
    pub x: &'a [f64],
    pub y: &'a [f64],
    pub z: &'a [f64],
    pub u: &'a [f64],
}

/// Default relative step for central-difference partials.
pub const FD_STEP: f64 = 1e-6;

/// A problem bound to a tree.
pub struct Model<'a> {
    problem: &'a dyn ControlProblem,
    tree: &'a ScenarioTree,
    dims: Dims,
    fd_step: f64,
}

impl<'a> Model<'a> {
    /// Binds and validates `problem` on `tree` (dimension checks, control
    /// boxes, coupling and terminal `z` probes).
    pub fn new(problem: &'a dyn ControlProblem, tree: &'a ScenarioTree) -> Result<Self> {
        let model = Model {
            problem,
            tree,
            dims: problem.dims(),
            fd_step: FD_STEP,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn with_fd_step(mut self, step: f64) -> Self {
        self.fd_step = step;
        self
    }

    pub fn problem(&self) -> &'a dyn ControlProblem {
        self.problem
    }

    pub fn tree(&self) -> &'a ScenarioTree {
        self.tree
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn horizon(&self) -> usize {
        self.tree.horizon()
    }

    pub fn coupling(&self) -> Coupling {
        self.problem.coupling()
    }

    pub fn initial_state(&self) -> DVector<f64> {
        self.problem.initial_state()
    }

    pub fn control_box(&self, t: usize) -> ControlBox {
        self.problem.control_box(t)
    }

    fn point<'b>(&self, t: usize, node: usize, v: &Vars<'b>) -> Point<'b>
    where
        'a: 'b,
    {
        Point {
            t,
            horizon: self.tree.horizon(),
            node,
            w: self.tree.path_value(t, node),
            x: v.x,
            y: v.y,
            z: v.z,
            u: v.u,
        }
    }

    fn check(&self, what: &'static str, t: usize, node: usize, values: &[f64], expected: (usize, usize), found: (usize, usize)) -> Result<()> {
        if expected != found {
            return Err(Error::ShapeMismatch {
                what: format!("{what} at t={t}"),
                expected,
                found,
            });
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { what, t, node });
        }
        Ok(())
    }

    pub fn drift(&self, t: usize, node: usize, v: &Vars) -> Result<DVector<f64>> {
        let m = self.dims.m;
        if t >= self.horizon() {
            return Ok(DVector::zeros(m));
        }
        let out = self.problem.drift(&self.point(t, node, v));
        self.check("drift", t, node, out.as_slice(), (m, 1), (out.len(), 1))?;
        Ok(out)
    }

    pub fn diffusion(&self, t: usize, node: usize, v: &Vars) -> Result<DMatrix<f64>> {
        let (m, d) = (self.dims.m, self.dims.d);
        if t >= self.horizon() {
            return Ok(DMatrix::zeros(m, d));
        }
        let out = self.problem.diffusion(&self.point(t, node, v));
        self.check("diffusion", t, node, out.as_slice(), (m, d), out.shape())?;
        Ok(out)
    }

    pub fn generator(&self, t: usize, node: usize, v: &Vars) -> Result<DVector<f64>> {
        let n = self.dims.n;
        if t == 0 {
            return Ok(DVector::zeros(n));
        }
        let out = self.problem.generator(&self.point(t, node, v));
        self.check("generator", t, node, out.as_slice(), (n, 1), (out.len(), 1))?;
        Ok(out)
    }

    pub fn running_cost(&self, t: usize, node: usize, v: &Vars) -> Result<f64> {
        if t >= self.horizon() {
            return Ok(0.0);
        }
        let out = self.problem.running_cost(&self.point(t, node, v));
        self.check("running cost", t, node, &[out], (1, 1), (1, 1))?;
        Ok(out)
    }

    fn terminal_vars<'b>(x: &'b [f64]) -> Vars<'b> {
        Vars { x, y: &[], z: &[], u: &[] }
    }

    pub fn terminal_cost(&self, node: usize, x: &[f64]) -> Result<f64> {
        let t = self.horizon();
        let out = self.problem.terminal_cost(&self.point(t, node, &Self::terminal_vars(x)));
        self.check("terminal cost", t, node, &[out], (1, 1), (1, 1))?;
        Ok(out)
    }

    pub fn terminal_value(&self, node: usize, x: &[f64]) -> Result<DVector<f64>> {
        let t = self.horizon();
        let out = self.problem.terminal_value(&self.point(t, node, &Self::terminal_vars(x)));
        self.check("terminal value", t, node, out.as_slice(), (self.dims.n, 1), (out.len(), 1))?;
        Ok(out)
    }

    fn finish_jacobian(&self, what: &'static str, t: usize, node: usize, rows: usize, j: Jacobian) -> Result<Jacobian> {
        if !j.shape_ok(rows, &self.dims, self.dims.m) {
            return Err(Error::ShapeMismatch {
                what: format!("{what} Jacobian at t={t}"),
                expected: (rows, self.dims.m),
                found: j.x.shape(),
            });
        }
        if !j.is_finite() {
            return Err(Error::NonFinite { what, t, node });
        }
        Ok(j)
    }

    /// Central differences of `eval` in every argument slot.
    fn fd_jacobian<F>(&self, rows: usize, v: &Vars, eval: F) -> Result<Jacobian>
    where
        F: Fn(&Vars) -> Result<Vec<f64>>,
    {
        let h = self.fd_step;
        let column = |slot: usize, j: usize| -> Result<Vec<f64>> {
            let mut buf = [v.x.to_vec(), v.y.to_vec(), v.z.to_vec(), v.u.to_vec()];
            let base = buf[slot][j];
            let step = h * base.abs().max(1.0);
            buf[slot][j] = base + step;
            let plus = eval(&Vars { x: &buf[0], y: &buf[1], z: &buf[2], u: &buf[3] })?;
            buf[slot][j] = base - step;
            let minus = eval(&Vars { x: &buf[0], y: &buf[1], z: &buf[2], u: &buf[3] })?;
            Ok(plus.iter().zip(&minus).map(|(a, b)| (a - b) / (2.0 * step)).collect())
        };
        let block = |slot: usize, len: usize| -> Result<DMatrix<f64>> {
            let mut m = DMatrix::zeros(rows, len);
            for j in 0..len {
                let c = column(slot, j)?;
                m.column_mut(j).copy_from_slice(&c);
            }
            Ok(m)
        };
        Ok(Jacobian {
            x: block(0, v.x.len())?,
            y: block(1, v.y.len())?,
            z: block(2, v.z.len())?,
            u: block(3, v.u.len())?,
        })
    }

    pub fn drift_jacobian(&self, t: usize, node: usize, v: &Vars) -> Result<Jacobian> {
        let m = self.dims.m;
        if t >= self.horizon() {
            return Ok(Jacobian::zeros(m, &self.dims, m));
        }
        let j = match self.problem.drift_jacobian(&self.point(t, node, v)) {
            Some(j) => j,
            None => self.fd_jacobian(m, v, |w| Ok(self.drift(t, node, w)?.as_slice().to_vec()))?,
        };
        self.finish_jacobian("drift", t, node, m, j)
    }

    pub fn diffusion_jacobian(&self, t: usize, node: usize, v: &Vars) -> Result<Jacobian> {
        let rows = self.dims.m * self.dims.d;
        if t >= self.horizon() {
            return Ok(Jacobian::zeros(rows, &self.dims, self.dims.m));
        }
        let j = match self.problem.diffusion_jacobian(&self.point(t, node, v)) {
            Some(j) => j,
            None => self.fd_jacobian(rows, v, |w| Ok(self.diffusion(t, node, w)?.as_slice().to_vec()))?,
        };
        self.finish_jacobian("diffusion", t, node, rows, j)
    }

    pub fn generator_jacobian(&self, t: usize, node: usize, v: &Vars) -> Result<Jacobian> {
        let n = self.dims.n;
        if t == 0 {
            return Ok(Jacobian::zeros(n, &self.dims, self.dims.m));
        }
        let j = match self.problem.generator_jacobian(&self.point(t, node, v)) {
            Some(j) => j,
            None => self.fd_jacobian(n, v, |w| Ok(self.generator(t, node, w)?.as_slice().to_vec()))?,
        };
        self.finish_jacobian("generator", t, node, n, j)
    }

    pub fn running_cost_gradient(&self, t: usize, node: usize, v: &Vars) -> Result<Jacobian> {
        if t >= self.horizon() {
            return Ok(Jacobian::zeros(1, &self.dims, self.dims.m));
        }
        let j = match self.problem.running_cost_gradient(&self.point(t, node, v)) {
            Some(j) => j,
            None => self.fd_jacobian(1, v, |w| Ok(vec![self.running_cost(t, node, w)?]))?,
        };
        self.finish_jacobian("running cost", t, node, 1, j)
    }

    pub fn terminal_cost_gradient(&self, node: usize, x: &[f64]) -> Result<DVector<f64>> {
        let t = self.horizon();
        let v = Self::terminal_vars(x);
        let g = match self.problem.terminal_cost_gradient(&self.point(t, node, &v)) {
            Some(g) => g,
            None => {
                let j = self.fd_jacobian(1, &v, |w| Ok(vec![self.terminal_cost(node, w.x)?]))?;
                j.x.row(0).transpose()
            }
        };
        self.check("terminal cost gradient", t, node, g.as_slice(), (self.dims.m, 1), (g.len(), 1))?;
        Ok(g)
    }

    pub fn terminal_value_jacobian(&self, node: usize, x: &[f64]) -> Result<DMatrix<f64>> {
        let t = self.horizon();
        let v = Self::terminal_vars(x);
        let j = match self.problem.terminal_value_jacobian(&self.point(t, node, &v)) {
            Some(j) => j,
            None => self.fd_jacobian(self.dims.n, &v, |w| Ok(self.terminal_value(node, w.x)?.as_slice().to_vec()))?.x,
        };
        self.check("terminal value Jacobian", t, node, j.as_slice(), (self.dims.n, self.dims.m), j.shape())?;
        Ok(j)
    }

    /// Zero control on `t = 0..=T`.
    pub fn zero_control(&self) -> AdaptedProcess {
        AdaptedProcess::zeros(self.tree, self.dims.r, 1, self.horizon() + 1)
    }

    /// Checks `u` has the right shape and lies in the boxes on `t < T`.
    pub fn check_admissible(&self, u: &AdaptedProcess) -> Result<()> {
        let horizon = self.horizon();
        if u.shape() != (self.dims.r, 1) || u.times() < horizon {
            return Err(Error::ShapeMismatch {
                what: "control".into(),
                expected: (self.dims.r, horizon + 1),
                found: (u.rows(), u.times()),
            });
        }
        for t in 0..horizon {
            let b = self.control_box(t);
            for a in 0..self.tree.level_size(t) {
                if let Some((j, value)) = b.violation(u.slice(t, a)) {
                    return Err(Error::Infeasible {
                        t,
                        node: a,
                        component: j,
                        value,
                        lower: b.lower[j],
                        upper: b.upper[j],
                    });
                }
            }
        }
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        let Dims { n, m, d, r } = self.dims;
        for (name, v) in [("n", n), ("m", m), ("d", d), ("r", r)] {
            if v == 0 {
                return Err(Error::config(name, "dimension must be at least 1"));
            }
        }
        if d != self.tree.dim() {
            return Err(Error::ShapeMismatch {
                what: "noise dimension d vs tree".into(),
                expected: (self.tree.dim(), 1),
                found: (d, 1),
            });
        }
        if self.coupling() == Coupling::Full && m != n {
            return Err(Error::Precondition(format!(
                "full coupling needs equal forward and backward dimensions (m = {m}, n = {n})"
            )));
        }
        let x0 = self.initial_state();
        self.check("initial state", 0, 0, x0.as_slice(), (m, 1), (x0.len(), 1))?;
        for t in 0..self.horizon() {
            let b = self.control_box(t);
            if b.dim() != r || b.upper.len() != r {
                return Err(Error::ShapeMismatch {
                    what: format!("control box at t={t}"),
                    expected: (r, 1),
                    found: (b.dim(), 1),
                });
            }
            b.validate()?;
        }
        self.probe()
    }

    /// Random-point probes: partial coupling must not read `(y, z)` in
    /// `b, σ`, and `f(T)` must not read `z`.
    fn probe(&self) -> Result<()> {
        const TOL: f64 = 1e-12;
        let Dims { n, m, d, r } = self.dims;
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        let mut draw = |len: usize| -> Vec<f64> { (0..len).map(|_| rng.random_range(-1.0..1.0)).collect() };
        let horizon = self.horizon();
        let partial = self.coupling() == Coupling::Partial;
        for _ in 0..2 {
            let (x, u) = (draw(m), draw(r));
            let (y1, z1, y2, z2) = (draw(n), draw(n * d), draw(n), draw(n * d));
            let v1 = Vars { x: &x, y: &y1, z: &z1, u: &u };
            let v2 = Vars { x: &x, y: &y2, z: &z2, u: &u };
            if partial {
                for t in 0..horizon {
                    let node = self.tree.level_size(t) - 1;
                    let (a, b) = (self.drift(t, node, &v1)?, self.drift(t, node, &v2)?);
                    let diff = (&a - &b).amax();
                    if diff > TOL * (1.0 + a.amax()) {
                        return Err(Error::CouplingViolation { coefficient: "b", t, difference: diff });
                    }
                    let (a, b) = (self.diffusion(t, node, &v1)?, self.diffusion(t, node, &v2)?);
                    let diff = (&a - &b).amax();
                    if diff > TOL * (1.0 + a.amax()) {
                        return Err(Error::CouplingViolation { coefficient: "sigma", t, difference: diff });
                    }
                }
            }
            let node = self.tree.level_size(horizon) - 1;
            let v3 = Vars { x: &x, y: &y1, z: &z2, u: &u };
            let a = self.generator(horizon, node, &v1)?;
            let diff = (&a - self.generator(horizon, node, &v3)?).amax();
            if diff > TOL * (1.0 + a.amax()) {
                return Err(Error::TerminalZDependence { difference: diff });
            }
        }
        Ok(())
    }
}
