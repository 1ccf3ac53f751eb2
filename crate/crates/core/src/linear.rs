//! Affine state equations with quadratic costs and random instance
//! generators.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::problem::{ControlBox, ControlProblem, Coupling, Dims, Jacobian, Point};

/// Coefficients are affine in `(x, y, vec z, u)`:
/// `b = Bx x + By y + Bz z + Bu u + b0`, `vec σ = Sx x + … + s0` (column-major
/// `m × d`), `f = Fx x + Fy y + Fz z + Fu u + f0` with the `z` term dropped
/// at `T`, `y_T = Φ x + y0`. Costs are
/// `l = ½ vᵀ Q v + cᵀ v` blockwise in `v = (x, y, z, u)` (block diagonal `Q`)
/// and `h = ½ xᵀ H x + hcᵀ x`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProblem {
    pub dims: Dims,
    pub coupling: Coupling,
    pub x0: DVector<f64>,
    pub bx: DMatrix<f64>,
    pub by: DMatrix<f64>,
    pub bz: DMatrix<f64>,
    pub bu: DMatrix<f64>,
    pub b0: DVector<f64>,
    pub sx: DMatrix<f64>,
    pub sy: DMatrix<f64>,
    pub sz: DMatrix<f64>,
    pub su: DMatrix<f64>,
    pub s0: DVector<f64>,
    pub fx: DMatrix<f64>,
    pub fy: DMatrix<f64>,
    pub fz: DMatrix<f64>,
    pub fu: DMatrix<f64>,
    pub f0: DVector<f64>,
    pub phi: DMatrix<f64>,
    pub y0: DVector<f64>,
    pub qx: DMatrix<f64>,
    pub qy: DMatrix<f64>,
    pub qz: DMatrix<f64>,
    pub qu: DMatrix<f64>,
    pub cx: DVector<f64>,
    pub cy: DVector<f64>,
    pub cz: DVector<f64>,
    pub cu: DVector<f64>,
    pub hq: DMatrix<f64>,
    pub hc: DVector<f64>,
    pub bounds: ControlBox,
}

impl LinearProblem {
    /// All coefficients zero, unbounded controls.
    pub fn zeros(dims: Dims, coupling: Coupling) -> Self {
        let Dims { n, m, d, r } = dims;
        let z = n * d;
        let md = m * d;
        LinearProblem {
            dims,
            coupling,
            x0: DVector::zeros(m),
            bx: DMatrix::zeros(m, m),
            by: DMatrix::zeros(m, n),
            bz: DMatrix::zeros(m, z),
            bu: DMatrix::zeros(m, r),
            b0: DVector::zeros(m),
            sx: DMatrix::zeros(md, m),
            sy: DMatrix::zeros(md, n),
            sz: DMatrix::zeros(md, z),
            su: DMatrix::zeros(md, r),
            s0: DVector::zeros(md),
            fx: DMatrix::zeros(n, m),
            fy: DMatrix::zeros(n, n),
            fz: DMatrix::zeros(n, z),
            fu: DMatrix::zeros(n, r),
            f0: DVector::zeros(n),
            phi: DMatrix::zeros(n, m),
            y0: DVector::zeros(n),
            qx: DMatrix::zeros(m, m),
            qy: DMatrix::zeros(n, n),
            qz: DMatrix::zeros(z, z),
            qu: DMatrix::zeros(r, r),
            cx: DVector::zeros(m),
            cy: DVector::zeros(n),
            cz: DVector::zeros(z),
            cu: DVector::zeros(r),
            hq: DMatrix::zeros(m, m),
            hc: DVector::zeros(m),
            bounds: ControlBox::unbounded(r),
        }
    }

    /// Scalar instance `ΔX = u + ΔW`, `l = x² + u²`, `h = x²`, `y_T = 0`,
    /// `f = 0`, `x0 = 0`.
    pub fn scalar_lq() -> Self {
        let mut p = Self::zeros(Dims { n: 1, m: 1, d: 1, r: 1 }, Coupling::Partial);
        p.bu[(0, 0)] = 1.0;
        p.s0[0] = 1.0;
        p.qx[(0, 0)] = 2.0;
        p.qu[(0, 0)] = 2.0;
        p.hq[(0, 0)] = 2.0;
        p
    }

    /// Fully coupled scalar instance `f = x`, `b = -y`, `σ = -z`, `x0 = 1`,
    /// `y_T = 0`.
    pub fn canonical_monotone() -> Self {
        let mut p = Self::zeros(Dims { n: 1, m: 1, d: 1, r: 1 }, Coupling::Full);
        p.x0[0] = 1.0;
        p.fx[(0, 0)] = 1.0;
        p.by[(0, 0)] = -1.0;
        p.sz[(0, 0)] = -1.0;
        p
    }

    fn stack(p: &Point) -> (DVector<f64>, DVector<f64>, DVector<f64>, DVector<f64>) {
        (
            DVector::from_column_slice(p.x),
            DVector::from_column_slice(p.y),
            DVector::from_column_slice(p.z),
            DVector::from_column_slice(p.u),
        )
    }

    fn terminal(p: &Point) -> bool {
        p.t >= p.horizon
    }

    fn quad(q: &DMatrix<f64>, c: &DVector<f64>, v: &DVector<f64>) -> f64 {
        0.5 * v.dot(&(q * v)) + c.dot(v)
    }

    fn sym_grad(q: &DMatrix<f64>, c: &DVector<f64>, v: &DVector<f64>) -> DMatrix<f64> {
        let g = 0.5 * (q + q.transpose()) * v + c;
        DMatrix::from_row_slice(1, g.len(), g.as_slice())
    }
}

impl ControlProblem for LinearProblem {
    fn dims(&self) -> Dims {
        self.dims
    }
    fn coupling(&self) -> Coupling {
        self.coupling
    }
    fn initial_state(&self) -> DVector<f64> {
        self.x0.clone()
    }
    fn drift(&self, p: &Point) -> DVector<f64> {
        let (x, y, z, u) = Self::stack(p);
        &self.bx * x + &self.by * y + &self.bz * z + &self.bu * u + &self.b0
    }
    fn diffusion(&self, p: &Point) -> DMatrix<f64> {
        let (x, y, z, u) = Self::stack(p);
        let v = &self.sx * x + &self.sy * y + &self.sz * z + &self.su * u + &self.s0;
        DMatrix::from_column_slice(self.dims.m, self.dims.d, v.as_slice())
    }
    fn generator(&self, p: &Point) -> DVector<f64> {
        let (x, y, z, u) = Self::stack(p);
        let mut out = &self.fx * x + &self.fy * y + &self.fu * u + &self.f0;
        if !Self::terminal(p) {
            out += &self.fz * z;
        }
        out
    }
    fn running_cost(&self, p: &Point) -> f64 {
        let (x, y, z, u) = Self::stack(p);
        Self::quad(&self.qx, &self.cx, &x)
            + Self::quad(&self.qy, &self.cy, &y)
            + Self::quad(&self.qz, &self.cz, &z)
            + Self::quad(&self.qu, &self.cu, &u)
    }
    fn terminal_cost(&self, p: &Point) -> f64 {
        Self::quad(&self.hq, &self.hc, &DVector::from_column_slice(p.x))
    }
    fn terminal_value(&self, p: &Point) -> DVector<f64> {
        &self.phi * DVector::from_column_slice(p.x) + &self.y0
    }
    fn control_box(&self, _: usize) -> ControlBox {
        self.bounds.clone()
    }

    fn drift_jacobian(&self, _: &Point) -> Option<Jacobian> {
        Some(Jacobian {
            x: self.bx.clone(),
            y: self.by.clone(),
            z: self.bz.clone(),
            u: self.bu.clone(),
        })
    }
    fn diffusion_jacobian(&self, _: &Point) -> Option<Jacobian> {
        Some(Jacobian {
            x: self.sx.clone(),
            y: self.sy.clone(),
            z: self.sz.clone(),
            u: self.su.clone(),
        })
    }
    fn generator_jacobian(&self, p: &Point) -> Option<Jacobian> {
        let fz = if Self::terminal(p) {
            DMatrix::zeros(self.fz.nrows(), self.fz.ncols())
        } else {
            self.fz.clone()
        };
        Some(Jacobian {
            x: self.fx.clone(),
            y: self.fy.clone(),
            z: fz,
            u: self.fu.clone(),
        })
    }
    fn running_cost_gradient(&self, p: &Point) -> Option<Jacobian> {
        let (x, y, z, u) = Self::stack(p);
        Some(Jacobian {
            x: Self::sym_grad(&self.qx, &self.cx, &x),
            y: Self::sym_grad(&self.qy, &self.cy, &y),
            z: Self::sym_grad(&self.qz, &self.cz, &z),
            u: Self::sym_grad(&self.qu, &self.cu, &u),
        })
    }
    fn terminal_cost_gradient(&self, p: &Point) -> Option<DVector<f64>> {
        let x = DVector::from_column_slice(p.x);
        Some(0.5 * (&self.hq + self.hq.transpose()) * x + &self.hc)
    }
    fn terminal_value_jacobian(&self, _: &Point) -> Option<DMatrix<f64>> {
        Some(self.phi.clone())
    }
}

fn uniform<R: Rng>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| scale * rng.random_range(-1.0..1.0))
}

fn uniform_vec<R: Rng>(rng: &mut R, len: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(len, |_, _| scale * rng.random_range(-1.0..1.0))
}

/// Symmetric positive semidefinite `A Aᵀ` with entries of order `scale`.
fn random_psd<R: Rng>(rng: &mut R, size: usize, scale: f64) -> DMatrix<f64> {
    let a = uniform(rng, size, size, scale.sqrt());
    &a * a.transpose()
}

/// Random partially coupled instance with every coefficient and cost term
/// active; `terminal_map` also makes `y_T` depend on `X_T`.
pub fn random_partial<R: Rng>(rng: &mut R, dims: Dims, terminal_map: bool) -> LinearProblem {
    let Dims { n, m, d, r } = dims;
    let mut p = LinearProblem::zeros(dims, Coupling::Partial);
    p.x0 = uniform_vec(rng, m, 1.0);
    p.bx = uniform(rng, m, m, 0.4);
    p.bu = uniform(rng, m, r, 1.0);
    p.b0 = uniform_vec(rng, m, 0.3);
    p.sx = uniform(rng, m * d, m, 0.4);
    p.su = uniform(rng, m * d, r, 0.5);
    p.s0 = uniform_vec(rng, m * d, 1.0);
    p.fx = uniform(rng, n, m, 1.0);
    p.fy = uniform(rng, n, n, 0.4);
    p.fz = uniform(rng, n, n * d, 0.4);
    p.fu = uniform(rng, n, r, 1.0);
    p.f0 = uniform_vec(rng, n, 0.3);
    if terminal_map {
        p.phi = uniform(rng, n, m, 1.0);
    }
    p.y0 = uniform_vec(rng, n, 1.0);
    p.qx = random_psd(rng, m, 1.0);
    p.qy = random_psd(rng, n, 1.0);
    p.qz = random_psd(rng, n * d, 0.5);
    p.qu = random_psd(rng, r, 1.0) + DMatrix::identity(r, r);
    p.cx = uniform_vec(rng, m, 1.0);
    p.cy = uniform_vec(rng, n, 1.0);
    p.cz = uniform_vec(rng, n * d, 1.0);
    p.cu = uniform_vec(rng, r, 1.0);
    p.hq = random_psd(rng, m, 1.0);
    p.hc = uniform_vec(rng, m, 1.0);
    p
}

/// Random partially coupled instance with `f ≡ 0`, `y_T = 0` and costs that
/// read only `(x, u)`.
pub fn random_forward_only<R: Rng>(rng: &mut R, dims: Dims) -> LinearProblem {
    let mut p = random_partial(rng, dims, false);
    let Dims { n, d, .. } = dims;
    p.fx.fill(0.0);
    p.fy.fill(0.0);
    p.fz.fill(0.0);
    p.fu.fill(0.0);
    p.f0.fill(0.0);
    p.y0.fill(0.0);
    p.qy = DMatrix::zeros(n, n);
    p.qz = DMatrix::zeros(n * d, n * d);
    p.cy.fill(0.0);
    p.cz.fill(0.0);
    p
}

/// Random fully coupled instance with `d = 1` whose coefficient matrix
/// `[[-Fx, -Fy, -Fz], [Bx, By, Bz], [Sx, Sy, Sz]]` has symmetric part
/// `≤ -α I`; principal blocks inherit the bound, so every time case holds.
pub fn random_monotone<R: Rng>(rng: &mut R, n: usize, r: usize, alpha: f64) -> LinearProblem {
    let dims = Dims { n, m: n, d: 1, r };
    let mut p = LinearProblem::zeros(dims, Coupling::Full);
    let size = 3 * n;
    let skew = {
        let a = uniform(rng, size, size, 0.5);
        &a - a.transpose()
    };
    let mat = skew - random_psd(rng, size, 0.3) - DMatrix::identity(size, size) * alpha;
    let block = |i: usize, j: usize| mat.view((i * n, j * n), (n, n)).into_owned();
    p.fx = -block(0, 0);
    p.fy = -block(0, 1);
    p.fz = -block(0, 2);
    p.bx = block(1, 0);
    p.by = block(1, 1);
    p.bz = block(1, 2);
    p.sx = block(2, 0);
    p.sy = block(2, 1);
    p.sz = block(2, 2);
    p.x0 = uniform_vec(rng, n, 1.0);
    p.bu = uniform(rng, n, r, 1.0);
    p.su = uniform(rng, n, r, 0.5);
    p.fu = uniform(rng, n, r, 1.0);
    p.b0 = uniform_vec(rng, n, 0.3);
    p.s0 = uniform_vec(rng, n, 0.5);
    p.f0 = uniform_vec(rng, n, 0.3);
    p.y0 = uniform_vec(rng, n, 1.0);
    p
}
