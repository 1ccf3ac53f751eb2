//! Forward rollout and the backward recursion for
//! `ΔY_t = -f(t+1, Y_{t+1}, Z_{t+1}) + Z_t ΔW_t + ΔN_t`, `Y_T = η`.
//!
//! Given `F = Y_{t+1} + f(t+1, Y_{t+1}, Z_{t+1})` on the children of a node,
//! `Y_t = E[F | F_t]`, `Z_t = E[F (ΔW_t)^* | F_t]` and the remainder
//! `ΔN_t = F - Y_t - Z_t ΔW_t` is the part of the martingale difference
//! orthogonal to `ΔW_t`. The covariance formula for `Z_t` is exact because
//! `E[ΔW_t (ΔW_t)^*] = I`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::tree::{AdaptedProcess, ScenarioTree};

/// Forward coefficients `b(t, x, u)` and `σ(t, x, u) = [σ_1 .. σ_d]`.
pub trait ForwardCoefficients {
    fn state_dim(&self) -> usize;
    fn drift(&self, t: usize, node: usize, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;
    /// `m × d` matrix whose column `i` is `σ_i`.
    fn diffusion(&self, t: usize, node: usize, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64>;
}

/// Backward generator `f(t, y, z)` evaluated at a time-`t` node, `t = 1..=T`.
///
/// Closures of the matching signature implement this trait; extra adapted
/// inputs (a state path, a control) are captured by the closure and looked
/// up by `(t, node)`.
pub trait Generator {
    fn eval(&self, t: usize, node: usize, y: &DVector<f64>, z: &DMatrix<f64>) -> Result<DVector<f64>>;
}

impl<F> Generator for F
where
    F: Fn(usize, usize, &DVector<f64>, &DMatrix<f64>) -> Result<DVector<f64>>,
{
    fn eval(&self, t: usize, node: usize, y: &DVector<f64>, z: &DMatrix<f64>) -> Result<DVector<f64>> {
        self(t, node, y, z)
    }
}

/// The generator `f ≡ 0`.
pub struct ZeroGenerator;

impl Generator for ZeroGenerator {
    fn eval(&self, _: usize, _: usize, y: &DVector<f64>, _: &DMatrix<f64>) -> Result<DVector<f64>> {
        Ok(DVector::zeros(y.len()))
    }
}

/// Solution triple of a backward equation.
#[derive(Debug, Clone, PartialEq)]
pub struct BsdeSolution {
    /// `n`-vectors on `t = 0..=T`.
    pub y: AdaptedProcess,
    /// `n × d` matrices on `t = 0..T`.
    pub z: AdaptedProcess,
    /// `n`-vectors on `t = 0..=T` with `N_0 = 0`.
    pub n: AdaptedProcess,
}

impl BsdeSolution {
    /// Largest node-wise residual of the backward equation over all edges.
    pub fn edge_residual<G: Generator + ?Sized>(&self, tree: &ScenarioTree, f: &G) -> Result<f64> {
        let dims = self.y.rows();
        let horizon = tree.horizon();
        let mut worst = 0.0_f64;
        for t in 0..horizon {
            for a in 0..tree.level_size(t) {
                let y_t = self.y.vector(t, a);
                let z_t = self.z.matrix(t, a);
                let n_t = self.n.vector(t, a);
                for k in 0..tree.branching(t) {
                    let c = tree.child(t, a, k);
                    let y_next = self.y.vector(t + 1, c);
                    let z_next = z_at(&self.z, t + 1, c, dims, tree.dim());
                    let gen = f.eval(t + 1, c, &y_next, &z_next)?;
                    let dw = DVector::from_column_slice(tree.increment(t, k));
                    let dn = self.n.vector(t + 1, c) - &n_t;
                    let r = (&y_next - &y_t) + gen - &z_t * dw - dn;
                    worst = worst.max(r.amax());
                }
            }
        }
        Ok(worst)
    }
}

/// `Z_t` at a node, or zeros at the terminal time where `Z` is undefined.
pub(crate) fn z_at(z: &AdaptedProcess, t: usize, node: usize, rows: usize, cols: usize) -> DMatrix<f64> {
    if t < z.times() {
        z.matrix(t, node)
    } else {
        DMatrix::zeros(rows, cols)
    }
}

/// Rolls `X_{t+1} = X_t + drift + diffusion · ΔW_t` along every edge, with
/// `step(t, node, X_t)` returning the drift vector and the `m × d` diffusion.
pub fn roll_forward<F>(tree: &ScenarioTree, x0: &[f64], mut step: F) -> Result<AdaptedProcess>
where
    F: FnMut(usize, usize, &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)>,
{
    let m = x0.len();
    let d = tree.dim();
    let horizon = tree.horizon();
    let mut x = AdaptedProcess::zeros(tree, m, 1, horizon + 1);
    x.set(0, 0, x0);
    for t in 0..horizon {
        for a in 0..tree.level_size(t) {
            let xt = x.vector(t, a);
            let (drift, diffusion) = step(t, a, &xt)?;
            if drift.len() != m || diffusion.shape() != (m, d) {
                return Err(Error::ShapeMismatch {
                    what: format!("forward coefficients at t={t}"),
                    expected: (m, d),
                    found: (drift.len(), diffusion.ncols()),
                });
            }
            if !drift.iter().chain(diffusion.iter()).all(|v| v.is_finite()) {
                return Err(Error::NonFinite {
                    what: "forward coefficients",
                    t,
                    node: a,
                });
            }
            let base = &xt + &drift;
            for k in 0..tree.branching(t) {
                let dw = DVector::from_column_slice(tree.increment(t, k));
                let next = &base + &diffusion * dw;
                x.set(t + 1, tree.child(t, a, k), next.as_slice());
            }
        }
    }
    Ok(x)
}

/// Solves the forward equation `ΔX_t = b(t, X_t, u_t) + Σ_i σ_i(t, X_t, u_t) ΔW_t^i`
/// from `X_0 = x0` under the control `u` (defined on `t = 0..T`).
pub fn solve_forward<C>(tree: &ScenarioTree, coeffs: &C, x0: &[f64], u: &AdaptedProcess) -> Result<AdaptedProcess>
where
    C: ForwardCoefficients + ?Sized,
{
    if x0.len() != coeffs.state_dim() {
        return Err(Error::ShapeMismatch {
            what: "initial state".into(),
            expected: (coeffs.state_dim(), 1),
            found: (x0.len(), 1),
        });
    }
    if u.times() < tree.horizon() {
        return Err(Error::TimeOutOfRange {
            t: tree.horizon() - 1,
            max: u.times().saturating_sub(1),
        });
    }
    roll_forward(tree, x0, |t, a, x| {
        let ut = u.vector(t, a);
        Ok((coeffs.drift(t, a, x, &ut), coeffs.diffusion(t, a, x, &ut)))
    })
}

/// Relative threshold for the terminal `z`-independence probe.
const Z_PROBE_TOL: f64 = 1e-12;

/// Solves the backward equation with terminal values `eta` (one vector per
/// leaf) by the exact level-by-level recursion.
pub fn solve_bsde<G>(tree: &ScenarioTree, f: &G, eta: &[DVector<f64>]) -> Result<BsdeSolution>
where
    G: Generator + ?Sized,
{
    let horizon = tree.horizon();
    let d = tree.dim();
    if eta.len() != tree.level_size(horizon) {
        return Err(Error::ShapeMismatch {
            what: "terminal values".into(),
            expected: (tree.level_size(horizon), 1),
            found: (eta.len(), 1),
        });
    }
    let n = eta[0].len();
    if let Some(bad) = eta.iter().find(|e| e.len() != n) {
        return Err(Error::ShapeMismatch {
            what: "terminal values".into(),
            expected: (n, 1),
            found: (bad.len(), 1),
        });
    }
    probe_terminal_z(tree, f, eta)?;

    let mut y = AdaptedProcess::zeros(tree, n, 1, horizon + 1);
    let mut z = AdaptedProcess::zeros(tree, n, d, horizon);
    // increments first, accumulated into N after the sweep
    let mut big_n = AdaptedProcess::zeros(tree, n, 1, horizon + 1);
    for (a, e) in eta.iter().enumerate() {
        y.set(horizon, a, e.as_slice());
    }

    let zero_z = DMatrix::zeros(n, d);
    for t in (0..horizon).rev() {
        // F = Y_{t+1} + f(t+1, Y_{t+1}, Z_{t+1}) on level t+1
        let level = tree.level_size(t + 1);
        let mut big_f = Vec::with_capacity(level);
        for c in 0..level {
            let yc = y.vector(t + 1, c);
            let zc = if t + 1 < horizon { z.matrix(t + 1, c) } else { zero_z.clone() };
            let g = f.eval(t + 1, c, &yc, &zc)?;
            if g.len() != n {
                return Err(Error::ShapeMismatch {
                    what: format!("generator output at t={}", t + 1),
                    expected: (n, 1),
                    found: (g.len(), 1),
                });
            }
            if !g.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite {
                    what: "generator",
                    t: t + 1,
                    node: c,
                });
            }
            big_f.push(yc + g);
        }
        let step = tree.step(t);
        for a in 0..tree.level_size(t) {
            let mut y_t = DVector::zeros(n);
            let mut z_t = DMatrix::zeros(n, d);
            for k in 0..step.len() {
                let fk = &big_f[tree.child(t, a, k)];
                let p = step.prob(k);
                let v = step.atom(k);
                y_t.axpy(p, fk, 1.0);
                for j in 0..d {
                    let mut col = z_t.column_mut(j);
                    col.axpy(p * v[j], fk, 1.0);
                }
            }
            for k in 0..step.len() {
                let c = tree.child(t, a, k);
                let dw = DVector::from_column_slice(step.atom(k));
                let dn = &big_f[c] - &y_t - &z_t * dw;
                big_n.set(t + 1, c, dn.as_slice());
            }
            y.set(t, a, y_t.as_slice());
            z.set(t, a, z_t.as_slice());
        }
    }
    accumulate_increments(tree, &mut big_n);
    Ok(BsdeSolution { y, z, n: big_n })
}

/// Turns per-edge increments stored at the child into the running sum.
pub(crate) fn accumulate_increments(tree: &ScenarioTree, p: &mut AdaptedProcess) {
    let rows = p.rows() * p.cols();
    for t in 1..p.times() {
        for c in 0..tree.level_size(t) {
            let (a, _) = tree.parent(t, c);
            let parent: Vec<f64> = p.slice(t - 1, a).to_vec();
            let slot = p.slice_mut(t, c);
            for i in 0..rows {
                slot[i] += parent[i];
            }
        }
    }
}

/// Evaluates `f(T, ·)` at a few leaves with two different `z` and rejects a
/// generator whose output moves.
fn probe_terminal_z<G: Generator + ?Sized>(tree: &ScenarioTree, f: &G, eta: &[DVector<f64>]) -> Result<()> {
    let horizon = tree.horizon();
    let n = eta[0].len();
    let d = tree.dim();
    let zero = DMatrix::zeros(n, d);
    let probe = DMatrix::from_fn(n, d, |i, j| 0.37 + 0.61 * (i as f64) - 0.43 * (j as f64));
    let leaves = tree.level_size(horizon);
    let picks = [0, leaves / 2, leaves - 1];
    for &a in &picks {
        let g0 = f.eval(horizon, a, &eta[a], &zero)?;
        let g1 = f.eval(horizon, a, &eta[a], &probe)?;
        let diff = (&g1 - &g0).amax();
        if diff > Z_PROBE_TOL * (1.0 + g0.amax()) {
            return Err(Error::TerminalZDependence { difference: diff });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::IncrementDistribution;

    struct Affine {
        drift: f64,
        vol: f64,
        linear: f64,
    }

    impl ForwardCoefficients for Affine {
        fn state_dim(&self) -> usize {
            1
        }
        fn drift(&self, _: usize, _: usize, x: &DVector<f64>, _: &DVector<f64>) -> DVector<f64> {
            DVector::from_element(1, self.drift + self.linear * x[0])
        }
        fn diffusion(&self, _: usize, _: usize, _: &DVector<f64>, _: &DVector<f64>) -> DMatrix<f64> {
            DMatrix::from_element(1, 1, self.vol)
        }
    }

    fn rademacher(t: usize) -> ScenarioTree {
        ScenarioTree::product(t, IncrementDistribution::rademacher(1)).unwrap()
    }

    #[test]
    fn forward_examples() {
        let tree = rademacher(4);
        let u = AdaptedProcess::zeros(&tree, 1, 1, 4);
        let x = solve_forward(&tree, &Affine { drift: 0.0, vol: 1.0, linear: 0.0 }, &[0.0], &u).unwrap();
        for t in 0..=4 {
            for a in 0..tree.level_size(t) {
                assert_eq!(x.slice(t, a)[0], tree.path_value(t, a)[0]);
            }
        }
        let x = solve_forward(&tree, &Affine { drift: 1.0, vol: 0.0, linear: 0.0 }, &[0.0], &u).unwrap();
        let x2 = solve_forward(&tree, &Affine { drift: 0.0, vol: 0.0, linear: 1.0 }, &[1.0], &u).unwrap();
        for t in 0..=4 {
            for a in 0..tree.level_size(t) {
                assert_eq!(x.slice(t, a)[0], t as f64);
                assert_eq!(x2.slice(t, a)[0], 2f64.powi(t as i32));
            }
        }
    }

    #[test]
    fn constant_terminal_zero_generator() {
        let tree = rademacher(3);
        let eta = vec![DVector::from_element(1, 4.0); 8];
        let sol = solve_bsde(&tree, &ZeroGenerator, &eta).unwrap();
        assert!((sol.y.sup_distance(&AdaptedProcess::constant(&tree, &[4.0], 4))) < 1e-15);
        assert_eq!(sol.z.sup_norm(), 0.0);
        assert_eq!(sol.n.sup_norm(), 0.0);
    }

    #[test]
    fn linear_generator_compounds() {
        let beta = 0.25;
        let c = 1.5;
        let tree = rademacher(4);
        let eta = vec![DVector::from_element(1, c); 16];
        let f = |_: usize, _: usize, y: &DVector<f64>, _: &DMatrix<f64>| Ok(y * beta);
        let sol = solve_bsde(&tree, &f, &eta).unwrap();
        for t in 0..=4 {
            let expected = (1.0 + beta).powi((4 - t) as i32) * c;
            for a in 0..tree.level_size(t) {
                assert!((sol.y.slice(t, a)[0] - expected).abs() < 1e-13);
            }
        }
        assert!(sol.z.sup_norm() < 1e-15);
    }

    #[test]
    fn trinomial_square_goes_to_remainder() {
        let tree = ScenarioTree::product(1, IncrementDistribution::trinomial(1)).unwrap();
        let eta: Vec<_> = (0..3)
            .map(|k| DVector::from_element(1, tree.increment(0, k)[0].powi(2) - 1.0))
            .collect();
        let sol = solve_bsde(&tree, &ZeroGenerator, &eta).unwrap();
        assert!(sol.y.slice(0, 0)[0].abs() < 1e-15);
        assert!(sol.z.slice(0, 0)[0].abs() < 1e-15);
        for k in 0..3 {
            assert!((sol.n.slice(1, k)[0] - eta[k][0]).abs() < 1e-15);
        }
        assert!(sol.n.sup_norm() > 0.5);
    }

    #[test]
    fn terminal_z_dependence_rejected() {
        let tree = rademacher(2);
        let eta = vec![DVector::from_element(1, 1.0); 4];
        let f = |_: usize, _: usize, _: &DVector<f64>, z: &DMatrix<f64>| Ok(DVector::from_element(1, z[(0, 0)]));
        assert!(matches!(
            solve_bsde(&tree, &f, &eta),
            Err(Error::TerminalZDependence { .. })
        ));
        let nan = |_: usize, _: usize, _: &DVector<f64>, _: &DMatrix<f64>| Ok(DVector::from_element(1, f64::NAN));
        assert!(matches!(solve_bsde(&tree, &nan, &eta), Err(Error::NonFinite { .. })));
    }
}
