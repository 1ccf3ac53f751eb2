//! Monotone condition for fully coupled problems.
//!
//! With `λ = (x, y, vec z)` and `A(t, λ) = (-f, b, vec σ)(t, λ)`, the
//! condition asks `⟨A(λ₁) - A(λ₂), λ₁ - λ₂⟩ ≤ -α |λ₁ - λ₂|²` for
//! `t = 1..T-1`, the `(y, z)` part of it at `t = 0` and the `x` part of `-f`
//! at `t = T`. For affine coefficients this is a bound on the largest
//! eigenvalue of the symmetric part of the coefficient matrix.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fbsde::control_at;
use crate::linearize::{Linearization, NodeJacobians};
use crate::problem::{Coupling, Jacobian, Model, Vars};
use crate::tree::AdaptedProcess;

/// Slack for declaring a pass.
pub const MONOTONE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MonotoneMode {
    /// Coefficient-matrix test at every node, exact for affine
    /// coefficients.
    LinearExact,
    /// Random pairs `(λ₁, λ₂)`; a falsifier, not a proof.
    Sampled { samples: usize, seed: u64 },
}

/// Worst eigenvalue (linear-exact) or worst pairing ratio (sampled) at one
/// `(t, node)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonotoneCase {
    pub t: usize,
    pub node: usize,
    pub worst: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonotoneReport {
    pub mode: MonotoneMode,
    /// Largest `α` the evidence supports: `-max worst`.
    pub alpha_estimate: f64,
    /// `max worst + α` for the requested `α`; positive means failure.
    pub violation: f64,
    pub location: Option<(usize, usize)>,
    pub passed: bool,
    pub cases: Vec<MonotoneCase>,
}

/// The time-`t` coefficient matrix whose symmetric part must be `≤ -α I`.
pub fn coefficient_matrix(b: &Jacobian, s: &Jacobian, f: &Jacobian, t: usize, horizon: usize) -> DMatrix<f64> {
    if t == horizon {
        return -&f.x;
    }
    let blocks: Vec<Vec<DMatrix<f64>>> = if t == 0 {
        vec![vec![b.y.clone(), b.z.clone()], vec![s.y.clone(), s.z.clone()]]
    } else {
        vec![
            vec![-&f.x, -&f.y, -&f.z],
            vec![b.x.clone(), b.y.clone(), b.z.clone()],
            vec![s.x.clone(), s.y.clone(), s.z.clone()],
        ]
    };
    let rows: usize = blocks.iter().map(|r| r[0].nrows()).sum();
    let cols: usize = blocks[0].iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut r0 = 0;
    for row in &blocks {
        let mut c0 = 0;
        for blk in row {
            out.view_mut((r0, c0), blk.shape()).copy_from(blk);
            c0 += blk.ncols();
        }
        r0 += row[0].nrows();
    }
    out
}

/// Largest eigenvalue of `(M + Mᵀ) / 2`.
pub fn symmetric_max_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let sym = (m + m.transpose()) * 0.5;
    sym.symmetric_eigen().eigenvalues.max()
}

fn node_worst(j: &NodeJacobians, t: usize, horizon: usize) -> f64 {
    symmetric_max_eigenvalue(&coefficient_matrix(&j.b, &j.s, &j.f, t, horizon))
}

/// Largest symmetric-part eigenvalue of the coefficient matrices along a
/// linearization; positive means the linearized system is not monotone.
pub fn linearized_violation(model: &Model, lin: &Linearization) -> f64 {
    let tree = model.tree();
    let horizon = tree.horizon();
    let mut worst = f64::NEG_INFINITY;
    for t in 0..=horizon {
        for a in 0..tree.level_size(t) {
            worst = worst.max(node_worst(lin.at(t, a), t, horizon));
        }
    }
    worst
}

fn control_vec(model: &Model, u: &AdaptedProcess, t: usize, node: usize) -> Vec<f64> {
    let s = control_at(u, t, node);
    if s.is_empty() {
        vec![0.0; model.dims().r]
    } else {
        s.to_vec()
    }
}

/// `A(t, λ)` restricted to the components paired in the time-`t` case.
fn pairing_map(model: &Model, t: usize, node: usize, x: &[f64], y: &[f64], z: &[f64], u: &[f64]) -> Result<Vec<f64>> {
    let horizon = model.horizon();
    let v = Vars { x, y, z, u };
    let mut out = Vec::new();
    if t == horizon {
        out.extend(model.generator(t, node, &v)?.iter().map(|f| -f));
        return Ok(out);
    }
    if t > 0 {
        out.extend(model.generator(t, node, &v)?.iter().map(|f| -f));
    }
    out.extend(model.drift(t, node, &v)?.iter());
    out.extend(model.diffusion(t, node, &v)?.iter());
    Ok(out)
}

/// Checks the monotone condition with constant `alpha` under control `u`.
pub fn check_monotone(model: &Model, u: &AdaptedProcess, mode: MonotoneMode, alpha: f64) -> Result<MonotoneReport> {
    if model.coupling() != Coupling::Full {
        return Err(Error::Precondition("monotone check applies to fully coupled problems".into()));
    }
    let tree = model.tree();
    let horizon = tree.horizon();
    let dims = model.dims();
    let (n, m, d) = (dims.n, dims.m, dims.d);
    let mut cases = Vec::new();
    match mode {
        MonotoneMode::LinearExact => {
            let zx = vec![0.0; m];
            let zy = vec![0.0; n];
            let zz = vec![0.0; n * d];
            for t in 0..=horizon {
                for a in 0..tree.level_size(t) {
                    let uu = control_vec(model, u, t, a);
                    let v = Vars { x: &zx, y: &zy, z: &zz, u: &uu };
                    let b = model.drift_jacobian(t, a, &v)?;
                    let s = model.diffusion_jacobian(t, a, &v)?;
                    let f = model.generator_jacobian(t, a, &v)?;
                    let worst = symmetric_max_eigenvalue(&coefficient_matrix(&b, &s, &f, t, horizon));
                    cases.push(MonotoneCase { t, node: a, worst });
                }
            }
        }
        MonotoneMode::Sampled { samples, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            const RADIUS: f64 = 2.0;
            let draw = |rng: &mut ChaCha8Rng, len: usize| -> Vec<f64> { (0..len).map(|_| rng.random_range(-RADIUS..RADIUS)).collect() };
            for i in 0..samples {
                let t = i % (horizon + 1);
                let node = rng.random_range(0..tree.level_size(t));
                let uu = control_vec(model, u, t, node);
                let (x1, y1, z1) = (draw(&mut rng, m), draw(&mut rng, n), draw(&mut rng, n * d));
                // alternate between distant pairs and nearby ones
                let scale = if i % 2 == 0 { 1.0 } else { 1e-3 };
                let mut shift = |len: usize, base: &[f64]| -> Vec<f64> { base.iter().take(len).map(|b| b + scale * rng.random_range(-RADIUS..RADIUS)).collect() };
                let x2 = if t == 0 { x1.clone() } else { shift(m, &x1) };
                let (y2, z2) = if t == horizon { (y1.clone(), z1.clone()) } else { (shift(n, &y1), shift(n * d, &z1)) };
                let a1 = pairing_map(model, t, node, &x1, &y1, &z1, &uu)?;
                let a2 = pairing_map(model, t, node, &x2, &y2, &z2, &uu)?;
                let mut dl: Vec<f64> = Vec::new();
                if t > 0 {
                    dl.extend(x1.iter().zip(&x2).map(|(a, b)| a - b));
                }
                if t < horizon {
                    dl.extend(y1.iter().zip(&y2).map(|(a, b)| a - b));
                    dl.extend(z1.iter().zip(&z2).map(|(a, b)| a - b));
                }
                let norm2: f64 = dl.iter().map(|v| v * v).sum();
                if norm2 == 0.0 {
                    continue;
                }
                let pairing: f64 = a1.iter().zip(&a2).zip(&dl).map(|((p, q), l)| (p - q) * l).sum();
                cases.push(MonotoneCase { t, node, worst: pairing / norm2 });
            }
        }
    }
    let (mut worst, mut location) = (f64::NEG_INFINITY, None);
    for c in &cases {
        if c.worst >= worst {
            worst = c.worst;
            location = Some((c.t, c.node));
        }
    }
    let violation = worst + alpha;
    Ok(MonotoneReport {
        mode,
        alpha_estimate: -worst,
        violation,
        location,
        passed: violation <= MONOTONE_TOL,
        cases,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linear::{random_monotone, LinearProblem};
    use crate::tree::{IncrementDistribution, ScenarioTree};
    use rand::SeedableRng;

    fn tree() -> ScenarioTree {
        ScenarioTree::product(3, IncrementDistribution::trinomial(1)).unwrap()
    }

    fn report(p: &LinearProblem, mode: MonotoneMode, alpha: f64) -> MonotoneReport {
        let tree = tree();
        let model = Model::new(p, &tree).unwrap();
        check_monotone(&model, &model.zero_control(), mode, alpha).unwrap()
    }

    #[test]
    fn canonical_has_alpha_one() {
        let r = report(&LinearProblem::canonical_monotone(), MonotoneMode::LinearExact, 1.0);
        assert_eq!(r.alpha_estimate, 1.0);
        assert!(r.passed);
        let sampled = report(&LinearProblem::canonical_monotone(), MonotoneMode::Sampled { samples: 200, seed: 1 }, 1.0);
        assert!(sampled.passed, "violation {}", sampled.violation);
        assert!((sampled.alpha_estimate - 1.0).abs() < 1e-9);
    }

    #[test]
    fn sign_flip_fails_at_terminal_case() {
        let mut p = LinearProblem::canonical_monotone();
        p.fx[(0, 0)] = -1.0;
        let r = report(&p, MonotoneMode::LinearExact, 0.0);
        assert!(!r.passed);
        assert_eq!(r.violation, 1.0);
        assert_eq!(r.location.unwrap().0, 3);
    }

    #[test]
    fn minimum_over_blocks() {
        let mut p = LinearProblem::canonical_monotone();
        p.fx[(0, 0)] = 2.0;
        p.by[(0, 0)] = -3.0;
        let r = report(&p, MonotoneMode::LinearExact, 1.0);
        assert!((r.alpha_estimate - 1.0).abs() < 1e-15);
        assert!(r.passed);
    }

    #[test]
    fn random_monotone_instances_pass() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5 {
            let p = random_monotone(&mut rng, 2, 1, 0.25);
            let r = report(&p, MonotoneMode::LinearExact, 0.25);
            assert!(r.passed, "violation {}", r.violation);
        }
    }

    #[test]
    fn partial_coupling_rejected() {
        let tree = tree();
        let p = LinearProblem::scalar_lq();
        let model = Model::new(&p, &tree).unwrap();
        assert!(check_monotone(&model, &model.zero_control(), MonotoneMode::LinearExact, 0.0).is_err());
    }
}
