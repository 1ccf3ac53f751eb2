//! Finite filtered probability spaces.
//!
//! A [`ScenarioTree`] is the product of `T` finitely supported, independent
//! increment distributions. The node at time `t` is the atom of `F_t`; it is
//! encoded as the mixed-radix word of atom indices chosen along its path, so
//! the children of node `a` at time `t` are `a * K_t + k`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Tolerance on the probability, mean and covariance conditions.
pub const MOMENT_TOL: f64 = 1e-12;

/// Largest accepted number of leaves.
pub const MAX_LEAVES: u128 = 1 << 24;

/// One-step law of the driving martingale increment `ΔW_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct IncrementDistribution {
    dim: usize,
    atoms: Vec<f64>,
    probs: Vec<f64>,
}

impl IncrementDistribution {
    /// Validates and builds a distribution from `(atom, probability)` data.
    ///
    /// Probabilities must lie in `(0, 1]` and sum to one, the atoms must have
    /// zero mean and identity second moment, all within [`MOMENT_TOL`].
    pub fn new(atoms: Vec<Vec<f64>>, probs: Vec<f64>) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::InvalidDistribution("no atoms".into()));
        }
        if atoms.len() != probs.len() {
            return Err(Error::InvalidDistribution(format!(
                "{} atoms but {} probabilities",
                atoms.len(),
                probs.len()
            )));
        }
        let dim = atoms[0].len();
        if dim == 0 {
            return Err(Error::InvalidDistribution("atoms have dimension 0".into()));
        }
        if let Some(bad) = atoms.iter().find(|a| a.len() != dim) {
            return Err(Error::InvalidDistribution(format!(
                "atom of dimension {} in a dimension-{dim} distribution",
                bad.len()
            )));
        }
        if let Some(p) = probs.iter().find(|p| !(**p > 0.0 && **p <= 1.0)) {
            return Err(Error::InvalidDistribution(format!(
                "probability {p} outside (0, 1]"
            )));
        }
        if atoms.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidDistribution("non-finite atom".into()));
        }
        let dist = IncrementDistribution {
            dim,
            atoms: atoms.into_iter().flatten().collect(),
            probs,
        };
        dist.validate()?;
        Ok(dist)
    }

    fn validate(&self) -> Result<()> {
        let total: f64 = self.probs.iter().sum();
        if (total - 1.0).abs() > MOMENT_TOL {
            return Err(Error::MomentViolation {
                moment: "probability (sum of weights)",
                residual: (total - 1.0).abs(),
            });
        }
        let d = self.dim;
        let mut mean = vec![0.0; d];
        let mut cov = DMatrix::<f64>::zeros(d, d);
        for k in 0..self.len() {
            let p = self.probs[k];
            let v = self.atom(k);
            for i in 0..d {
                mean[i] += p * v[i];
                for j in 0..d {
                    cov[(i, j)] += p * v[i] * v[j];
                }
            }
        }
        let mean_res = mean.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        if mean_res > MOMENT_TOL {
            return Err(Error::MomentViolation {
                moment: "first (zero mean)",
                residual: mean_res,
            });
        }
        let cov_res = (cov - DMatrix::identity(d, d)).amax();
        if cov_res > MOMENT_TOL {
            return Err(Error::MomentViolation {
                moment: "second (identity covariance)",
                residual: cov_res,
            });
        }
        Ok(())
    }

    /// Symmetric ±1 coin in each of `d` independent coordinates (`2^d` atoms).
    pub fn rademacher(d: usize) -> Self {
        Self::product_of(&[-1.0, 1.0], &[0.5, 0.5], d)
    }

    /// Atoms `{-√3, 0, √3}` with weights `{1/6, 2/3, 1/6}` in each of `d`
    /// independent coordinates (`3^d` atoms).
    pub fn trinomial(d: usize) -> Self {
        let s = 3f64.sqrt();
        Self::product_of(&[-s, 0.0, s], &[1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0], d)
    }

    fn product_of(values: &[f64], weights: &[f64], d: usize) -> Self {
        assert!(d >= 1, "dimension must be positive");
        let base = values.len();
        let count = base.pow(d as u32);
        let mut atoms = Vec::with_capacity(count * d);
        let mut probs = Vec::with_capacity(count);
        for mut code in 0..count {
            let mut p = 1.0;
            let mut atom = vec![0.0; d];
            for slot in atom.iter_mut().rev() {
                let k = code % base;
                code /= base;
                *slot = values[k];
                p *= weights[k];
            }
            atoms.extend(atom);
            probs.push(p);
        }
        IncrementDistribution {
            dim: d,
            atoms,
            probs,
        }
    }

    /// Number of atoms.
    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn atom(&self, k: usize) -> &[f64] {
        &self.atoms[k * self.dim..(k + 1) * self.dim]
    }

    pub fn prob(&self, k: usize) -> f64 {
        self.probs[k]
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
}

/// Finite product tree carrying the driving martingale `W`.
#[derive(Debug, Clone)]
pub struct ScenarioTree {
    steps: Vec<IncrementDistribution>,
    level_sizes: Vec<usize>,
    node_probs: Vec<Vec<f64>>,
    paths: Vec<Vec<f64>>,
}

impl ScenarioTree {
    /// Tree with the same increment law at every step.
    pub fn product(horizon: usize, dist: IncrementDistribution) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::ZeroHorizon);
        }
        Self::from_steps(vec![dist; horizon])
    }

    /// Tree with a possibly different increment law per step. All laws must
    /// share the same dimension.
    pub fn from_steps(steps: Vec<IncrementDistribution>) -> Result<Self> {
        if steps.is_empty() {
            return Err(Error::ZeroHorizon);
        }
        let d = steps[0].dim();
        for (t, s) in steps.iter().enumerate() {
            if s.dim() != d {
                return Err(Error::InvalidDistribution(format!(
                    "step {t} has dimension {} but step 0 has {d}",
                    s.dim()
                )));
            }
            s.validate()?;
        }
        let mut leaves: u128 = 1;
        for s in &steps {
            leaves = leaves.saturating_mul(s.len() as u128);
            if leaves > MAX_LEAVES {
                return Err(Error::TreeTooLarge {
                    leaves: steps.iter().fold(1u128, |a, s| a.saturating_mul(s.len() as u128)),
                    limit: MAX_LEAVES,
                });
            }
        }

        let horizon = steps.len();
        let mut level_sizes = vec![1usize];
        let mut node_probs = vec![vec![1.0]];
        let mut paths = vec![vec![0.0; d]];
        for t in 0..horizon {
            let step = &steps[t];
            let k_t = step.len();
            let size = level_sizes[t] * k_t;
            let mut probs = Vec::with_capacity(size);
            let mut path = Vec::with_capacity(size * d);
            for a in 0..level_sizes[t] {
                let parent_w = &paths[t][a * d..(a + 1) * d];
                for k in 0..k_t {
                    probs.push(node_probs[t][a] * step.prob(k));
                    path.extend(parent_w.iter().zip(step.atom(k)).map(|(w, v)| w + v));
                }
            }
            level_sizes.push(size);
            node_probs.push(probs);
            paths.push(path);
        }
        Ok(ScenarioTree {
            steps,
            level_sizes,
            node_probs,
            paths,
        })
    }

    pub fn horizon(&self) -> usize {
        self.steps.len()
    }

    /// Dimension `d` of the driving martingale.
    pub fn dim(&self) -> usize {
        self.steps[0].dim()
    }

    pub fn level_size(&self, t: usize) -> usize {
        self.level_sizes[t]
    }

    pub fn total_nodes(&self) -> usize {
        self.level_sizes.iter().sum()
    }

    /// Number of atoms of `ΔW_t`.
    pub fn branching(&self, t: usize) -> usize {
        self.steps[t].len()
    }

    pub fn step(&self, t: usize) -> &IncrementDistribution {
        &self.steps[t]
    }

    #[inline]
    pub fn child(&self, t: usize, node: usize, k: usize) -> usize {
        node * self.steps[t].len() + k
    }

    /// Parent node at `t - 1` and the atom index leading to `node` at `t`.
    #[inline]
    pub fn parent(&self, t: usize, node: usize) -> (usize, usize) {
        let k_t = self.steps[t - 1].len();
        (node / k_t, node % k_t)
    }

    /// Value of `ΔW_t` along atom `k`.
    #[inline]
    pub fn increment(&self, t: usize, k: usize) -> &[f64] {
        self.steps[t].atom(k)
    }

    pub fn node_probability(&self, t: usize, node: usize) -> f64 {
        self.node_probs[t][node]
    }

    /// `W_t` at the node (with `W_0 = 0`).
    pub fn path_value(&self, t: usize, node: usize) -> &[f64] {
        let d = self.dim();
        &self.paths[t][node * d..(node + 1) * d]
    }

    fn check_time(&self, t: usize, max: usize) -> Result<()> {
        if t > max {
            Err(Error::TimeOutOfRange { t, max })
        } else {
            Ok(())
        }
    }

    /// `E[v_{t+1} | F_t]` at every time-`t` node, as an exact weighted sum
    /// over the children.
    pub fn conditional_expectation(
        &self,
        v: &AdaptedProcess,
        t: usize,
    ) -> Result<Vec<DMatrix<f64>>> {
        self.check_time(t, self.horizon() - 1)?;
        if v.times() <= t + 1 {
            return Err(Error::TimeOutOfRange {
                t: t + 1,
                max: v.times().saturating_sub(1),
            });
        }
        v.check_level(self, t + 1)?;
        let k_t = self.branching(t);
        let (rows, cols) = v.shape();
        Ok((0..self.level_size(t))
            .map(|a| {
                let mut acc = DMatrix::zeros(rows, cols);
                for k in 0..k_t {
                    let child = self.child(t, a, k);
                    let p = self.steps[t].prob(k);
                    for (dst, src) in acc.iter_mut().zip(v.slice(t + 1, child)) {
                        *dst += p * src;
                    }
                }
                acc
            })
            .collect())
    }

    /// Unconditional expectation of a time-`t` random variable.
    pub fn expectation(&self, v: &AdaptedProcess, t: usize) -> Result<DMatrix<f64>> {
        self.check_time(t, self.horizon())?;
        if v.times() <= t {
            return Err(Error::TimeOutOfRange {
                t,
                max: v.times().saturating_sub(1),
            });
        }
        v.check_level(self, t)?;
        let (rows, cols) = v.shape();
        let mut acc = DMatrix::zeros(rows, cols);
        for a in 0..self.level_size(t) {
            let p = self.node_probs[t][a];
            for (dst, src) in acc.iter_mut().zip(v.slice(t, a)) {
                *dst += p * src;
            }
        }
        Ok(acc)
    }

    /// Checks that `N` starts at zero, is a martingale and is strongly
    /// orthogonal to `W`: `E[ΔN_t | F_t] = 0` and
    /// `E[ΔN_t (ΔW_t)^* | F_t] = 0` at every node.
    pub fn check_strong_orthogonality(&self, n: &AdaptedProcess, tol: f64) -> OrthogonalityReport {
        let mut report = OrthogonalityReport {
            max_residual: 0.0,
            location: None,
            passed: true,
        };
        let mut record = |res: f64, t: usize, node: usize, kind: OrthogonalityKind| {
            if res > report.max_residual || res.is_nan() {
                report.max_residual = res;
                report.location = Some((t, node, kind));
            }
        };
        if n.times() == 0 || n.cols() != 1 {
            report.max_residual = f64::INFINITY;
            report.passed = false;
            return report;
        }
        let rows = n.rows();
        let d = self.dim();
        record(
            n.slice(0, 0).iter().fold(0.0_f64, |m, v| m.max(v.abs())),
            0,
            0,
            OrthogonalityKind::InitialValue,
        );
        let last = (n.times() - 1).min(self.horizon());
        for t in 0..last {
            let k_t = self.branching(t);
            for a in 0..self.level_size(t) {
                let base = n.slice(t, a);
                let mut mean = vec![0.0; rows];
                let mut cross = vec![0.0; rows * d];
                for k in 0..k_t {
                    let p = self.steps[t].prob(k);
                    let v = self.increment(t, k);
                    let next = n.slice(t + 1, self.child(t, a, k));
                    for i in 0..rows {
                        let dn = next[i] - base[i];
                        mean[i] += p * dn;
                        for j in 0..d {
                            cross[i * d + j] += p * dn * v[j];
                        }
                    }
                }
                record(
                    mean.iter().fold(0.0_f64, |m, v| m.max(v.abs())),
                    t,
                    a,
                    OrthogonalityKind::Martingale,
                );
                record(
                    cross.iter().fold(0.0_f64, |m, v| m.max(v.abs())),
                    t,
                    a,
                    OrthogonalityKind::Orthogonality,
                );
            }
        }
        report.passed = report.max_residual <= tol;
        report
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OrthogonalityKind {
    /// `N_0 != 0`.
    InitialValue,
    /// `E[ΔN_t | F_t] != 0`.
    Martingale,
    /// `E[ΔN_t (ΔW_t)^* | F_t] != 0`.
    Orthogonality,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrthogonalityReport {
    pub max_residual: f64,
    /// `(t, node, kind)` of the worst residual.
    pub location: Option<(usize, usize, OrthogonalityKind)>,
    pub passed: bool,
}

/// Matrix-valued process indexed by `(t, node)`.
///
/// Values at time `t` depend on the time-`t` node only, so adaptedness holds
/// by construction. Values are stored column-major per node.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedProcess {
    rows: usize,
    cols: usize,
    levels: Vec<Vec<f64>>,
}

impl AdaptedProcess {
    /// Zero process defined for `t = 0..times`.
    pub fn zeros(tree: &ScenarioTree, rows: usize, cols: usize, times: usize) -> Self {
        assert!(times <= tree.horizon() + 1, "process outlives the tree");
        let size = rows * cols;
        AdaptedProcess {
            rows,
            cols,
            levels: (0..times)
                .map(|t| vec![0.0; tree.level_size(t) * size])
                .collect(),
        }
    }

    /// Process filled from a closure returning a column-major slice.
    pub fn from_fn<F>(tree: &ScenarioTree, rows: usize, cols: usize, times: usize, mut f: F) -> Self
    where
        F: FnMut(usize, usize) -> Vec<f64>,
    {
        let mut p = Self::zeros(tree, rows, cols, times);
        for t in 0..times {
            for a in 0..tree.level_size(t) {
                let v = f(t, a);
                p.set(t, a, &v);
            }
        }
        p
    }

    /// Constant vector process.
    pub fn constant(tree: &ScenarioTree, value: &[f64], times: usize) -> Self {
        Self::from_fn(tree, value.len(), 1, times, |_, _| value.to_vec())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    /// Number of time indices (the process lives on `0..times`).
    pub fn times(&self) -> usize {
        self.levels.len()
    }

    pub fn nodes_at(&self, t: usize) -> usize {
        self.levels[t].len() / (self.rows * self.cols).max(1)
    }

    fn check_level(&self, tree: &ScenarioTree, t: usize) -> Result<()> {
        let n = self.nodes_at(t);
        if n != tree.level_size(t) {
            return Err(Error::ShapeMismatch {
                what: format!("process level {t}"),
                expected: (tree.level_size(t), 1),
                found: (n, 1),
            });
        }
        Ok(())
    }

    #[inline]
    pub fn slice(&self, t: usize, node: usize) -> &[f64] {
        let s = self.rows * self.cols;
        &self.levels[t][node * s..(node + 1) * s]
    }

    #[inline]
    pub fn slice_mut(&mut self, t: usize, node: usize) -> &mut [f64] {
        let s = self.rows * self.cols;
        &mut self.levels[t][node * s..(node + 1) * s]
    }

    pub fn set(&mut self, t: usize, node: usize, value: &[f64]) {
        self.slice_mut(t, node).copy_from_slice(value);
    }

    pub fn vector(&self, t: usize, node: usize) -> DVector<f64> {
        DVector::from_column_slice(self.slice(t, node))
    }

    pub fn matrix(&self, t: usize, node: usize) -> DMatrix<f64> {
        DMatrix::from_column_slice(self.rows, self.cols, self.slice(t, node))
    }

    /// All values, level after level.
    pub fn flatten(&self) -> Vec<f64> {
        self.levels.concat()
    }

    /// Overwrites every value from a buffer laid out as in [`Self::flatten`].
    pub fn assign_flat(&mut self, values: &[f64]) {
        let total: usize = self.levels.iter().map(Vec::len).sum();
        assert_eq!(values.len(), total, "flat buffer length");
        let mut off = 0;
        for level in &mut self.levels {
            let len = level.len();
            level.copy_from_slice(&values[off..off + len]);
            off += len;
        }
    }

    /// Flat column-major values of every node at time `t`.
    pub fn level(&self, t: usize) -> &[f64] {
        &self.levels[t]
    }

    pub fn sup_norm(&self) -> f64 {
        self.levels
            .iter()
            .flatten()
            .fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// Largest entrywise difference over all common times.
    pub fn sup_distance(&self, other: &AdaptedProcess) -> f64 {
        self.levels
            .iter()
            .zip(&other.levels)
            .flat_map(|(a, b)| a.iter().zip(b))
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()))
    }

    /// `self - other`, over the common times.
    pub fn difference(&self, other: &AdaptedProcess) -> AdaptedProcess {
        AdaptedProcess {
            rows: self.rows,
            cols: self.cols,
            levels: self
                .levels
                .iter()
                .zip(&other.levels)
                .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x - y).collect())
                .collect(),
        }
    }

    /// `theta * other + (1 - theta) * self`, in place.
    pub fn relax_towards(&mut self, other: &AdaptedProcess, theta: f64) {
        for (a, b) in self.levels.iter_mut().zip(&other.levels) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += theta * (y - *x);
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.levels.iter_mut().flatten().for_each(|v| *v *= factor);
    }

    /// `sup_t E|v_t|^2` with the Frobenius norm.
    pub fn sup_mean_square(&self, tree: &ScenarioTree) -> f64 {
        (0..self.times())
            .map(|t| self.mean_square(tree, t))
            .fold(0.0, f64::max)
    }

    /// `E|v_t|^2` with the Frobenius norm.
    pub fn mean_square(&self, tree: &ScenarioTree, t: usize) -> f64 {
        (0..self.nodes_at(t))
            .map(|a| {
                tree.node_probability(t, a) * self.slice(t, a).iter().map(|v| v * v).sum::<f64>()
            })
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.levels.iter().flatten().all(|v| v.is_finite())
    }
}

/// `W` as an adapted `d`-vector process on `t = 0..=T`.
pub fn path_process(tree: &ScenarioTree) -> AdaptedProcess {
    AdaptedProcess::from_fn(tree, tree.dim(), 1, tree.horizon() + 1, |t, a| {
        tree.path_value(t, a).to_vec()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trinomial_tree(t: usize) -> ScenarioTree {
        ScenarioTree::product(t, IncrementDistribution::trinomial(1)).unwrap()
    }

    #[test]
    fn rademacher_tree_doubles() {
        let tree = ScenarioTree::product(3, IncrementDistribution::rademacher(1)).unwrap();
        for t in 0..=3 {
            assert_eq!(tree.level_size(t), 1 << t);
            let s: f64 = (0..tree.level_size(t)).map(|a| tree.node_probability(t, a)).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn trinomial_moments() {
        let d = IncrementDistribution::trinomial(1);
        assert_eq!(d.len(), 3);
        let mean: f64 = (0..3).map(|k| d.prob(k) * d.atom(k)[0]).sum();
        let var: f64 = (0..3).map(|k| d.prob(k) * d.atom(k)[0].powi(2)).sum();
        assert!(mean.abs() < 1e-15);
        assert!((var - 1.0).abs() < 1e-12);
        assert!(IncrementDistribution::new(
            vec![vec![-3f64.sqrt()], vec![0.0], vec![3f64.sqrt()]],
            vec![1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0]
        )
        .is_ok());
    }

    #[test]
    fn product_rademacher_covariance() {
        let d = IncrementDistribution::rademacher(2);
        assert_eq!(d.len(), 4);
        let mut cov = DMatrix::<f64>::zeros(2, 2);
        for k in 0..4 {
            let v = d.atom(k);
            assert_eq!(d.prob(k), 0.25);
            for i in 0..2 {
                for j in 0..2 {
                    cov[(i, j)] += d.prob(k) * v[i] * v[j];
                }
            }
        }
        assert_eq!(cov, DMatrix::identity(2, 2));
    }

    #[test]
    fn moment_violations_are_named() {
        let err = IncrementDistribution::new(vec![vec![1.0], vec![-0.5]], vec![0.5, 0.5]).unwrap_err();
        match err {
            Error::MomentViolation { moment, residual } => {
                assert!(moment.starts_with("first"));
                assert!((residual - 0.25).abs() < 1e-15);
            }
            other => panic!("unexpected {other:?}"),
        }
        let err = IncrementDistribution::new(vec![vec![2.0], vec![-2.0]], vec![0.5, 0.5]).unwrap_err();
        assert!(matches!(err, Error::MomentViolation { moment, .. } if moment.starts_with("second")));
        let err = IncrementDistribution::new(vec![vec![1.0], vec![-1.0]], vec![0.5, 0.4]).unwrap_err();
        assert!(matches!(err, Error::MomentViolation { moment, .. } if moment.starts_with("probability")));
    }

    #[test]
    fn size_guard() {
        let err = ScenarioTree::product(25, IncrementDistribution::rademacher(1)).unwrap_err();
        assert!(matches!(err, Error::TreeTooLarge { .. }));
        assert!(ScenarioTree::product(24, IncrementDistribution::rademacher(1)).is_ok());
        assert!(matches!(
            ScenarioTree::product(0, IncrementDistribution::rademacher(1)),
            Err(Error::ZeroHorizon)
        ));
    }

    #[test]
    fn navigation_round_trips() {
        let tree = ScenarioTree::product(3, IncrementDistribution::trinomial(1)).unwrap();
        for t in 0..3 {
            for a in 0..tree.level_size(t) {
                for k in 0..3 {
                    let c = tree.child(t, a, k);
                    assert_eq!(tree.parent(t + 1, c), (a, k));
                }
            }
        }
    }

    #[test]
    fn conditional_expectation_examples() {
        let tree = trinomial_tree(2);
        let c = AdaptedProcess::constant(&tree, &[2.5], 3);
        for v in tree.conditional_expectation(&c, 1).unwrap() {
            assert!((v[0] - 2.5).abs() < 1e-15);
        }
        // the increment itself and its square
        let inc = AdaptedProcess::from_fn(&tree, 1, 1, 3, |t, a| {
            if t == 0 {
                vec![0.0]
            } else {
                let (_, k) = tree.parent(t, a);
                vec![tree.increment(t - 1, k)[0]]
            }
        });
        let sq = AdaptedProcess::from_fn(&tree, 1, 1, 3, |t, a| vec![inc.slice(t, a)[0].powi(2)]);
        for t in 0..2 {
            for v in tree.conditional_expectation(&inc, t).unwrap() {
                assert!(v[0].abs() < 1e-15);
            }
            for v in tree.conditional_expectation(&sq, t).unwrap() {
                assert!((v[0] - 1.0).abs() < 1e-12);
            }
        }
        assert!(matches!(
            tree.conditional_expectation(&c, 2),
            Err(Error::TimeOutOfRange { .. })
        ));
    }

    #[test]
    fn expectation_of_path_square() {
        let tree = ScenarioTree::product(4, IncrementDistribution::rademacher(2)).unwrap();
        let w = path_process(&tree);
        for t in 0..=4 {
            let m = tree.expectation(&w, t).unwrap();
            assert!(m.amax() < 1e-14);
            // brute-force sum over nodes of |W_t|^2
            let mut s = 0.0;
            for a in 0..tree.level_size(t) {
                let v = tree.path_value(t, a);
                s += tree.node_probability(t, a) * (v[0] * v[0] + v[1] * v[1]);
            }
            assert!((s - (2 * t) as f64).abs() < 1e-12);
            assert!((w.mean_square(&tree, t) - s).abs() < 1e-12);
        }
    }

    #[test]
    fn orthogonality_examples() {
        let tree = trinomial_tree(1);
        let zero = AdaptedProcess::zeros(&tree, 1, 1, 2);
        let r = tree.check_strong_orthogonality(&zero, 1e-12);
        assert!(r.passed);
        assert_eq!(r.max_residual, 0.0);

        let square = AdaptedProcess::from_fn(&tree, 1, 1, 2, |t, a| {
            if t == 0 {
                vec![0.0]
            } else {
                vec![tree.increment(0, a)[0].powi(2) - 1.0]
            }
        });
        assert!(tree.check_strong_orthogonality(&square, 1e-12).passed);

        let linear = AdaptedProcess::from_fn(&tree, 1, 1, 2, |t, a| {
            if t == 0 {
                vec![0.0]
            } else {
                vec![tree.increment(0, a)[0]]
            }
        });
        let r = tree.check_strong_orthogonality(&linear, 1e-12);
        assert!(!r.passed);
        assert!((r.max_residual - 1.0).abs() < 1e-12);
        assert_eq!(r.location, Some((0, 0, OrthogonalityKind::Orthogonality)));
    }
}
