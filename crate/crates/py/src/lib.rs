//! Python bindings: problems, trees and the solver operations.
//!
//! Adapted processes cross the boundary as nested lists indexed
//! `[t][node][component]`, with matrix entries in column-major order.
//!
//! ```text
//! import dsmp_py
//! p = dsmp_py.Problem.catalog("lq-forward")
//! tree = p.tree()
//! res = p.optimize(tree)
//! print(res["cost"], p.check_mp(tree, res["control"])["passed"])
//! ```

use std::cell::RefCell;

use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use dsmp::adjoint::{adjoint_residuals, check_maximum_principle, duality_check, solve_adjoint_with};
use dsmp::config::{ExprProblem, ProblemFile};
use dsmp::fbsde::{residuals, solve_state, ControlledSystem, SolverConfig};
use dsmp::linearize::Linearization;
use dsmp::monotone::{check_monotone, MonotoneMode};
use dsmp::optimizer::{cost, evaluate, minimize, OptimizerConfig};
use dsmp::perturbation::{default_ladder, epsilon_scaling_experiment, Perturbation};
use dsmp::problem::{Coupling, Model};
use dsmp::sde::solve_bsde as solve_bsde_core;
use dsmp::tree::{AdaptedProcess, IncrementDistribution, ScenarioTree};
use dsmp::{catalog, Error};

type Nested = Vec<Vec<Vec<f64>>>;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::NotConverged { .. } | Error::SingularJacobian { .. } | Error::NewtonStalled { .. } | Error::NonFinite { .. } => {
            PyRuntimeError::new_err(e.to_string())
        }
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn nested(v: &AdaptedProcess) -> Nested {
    (0..v.times())
        .map(|t| (0..v.nodes_at(t)).map(|a| v.slice(t, a).to_vec()).collect())
        .collect()
}

fn from_nested(tree: &ScenarioTree, values: &Nested, rows: usize, times: usize) -> PyResult<AdaptedProcess> {
    if values.len() != times {
        return Err(PyValueError::new_err(format!("expected {times} time levels, found {}", values.len())));
    }
    let mut v = AdaptedProcess::zeros(tree, rows, 1, times);
    for (t, level) in values.iter().enumerate() {
        if level.len() != tree.level_size(t) {
            return Err(PyValueError::new_err(format!("time {t}: expected {} nodes, found {}", tree.level_size(t), level.len())));
        }
        for (a, x) in level.iter().enumerate() {
            if x.len() != rows {
                return Err(PyValueError::new_err(format!("t={t}, node={a}: expected {rows} components, found {}", x.len())));
            }
            v.set(t, a, x);
        }
    }
    Ok(v)
}

/// Finite scenario tree with i.i.d. increments.
#[pyclass(name = "Tree", frozen)]
struct PyTree {
    inner: ScenarioTree,
}

#[pymethods]
impl PyTree {
    /// `family` is "rademacher" or "trinomial"; pass `atoms` and `probs` for
    /// a custom one-step law.
    #[new]
    #[pyo3(signature = (horizon, family="rademacher", d=1, atoms=None, probs=None))]
    fn new(horizon: usize, family: &str, d: usize, atoms: Option<Vec<Vec<f64>>>, probs: Option<Vec<f64>>) -> PyResult<Self> {
        let dist = match (family, atoms, probs) {
            (_, Some(atoms), Some(probs)) => IncrementDistribution::new(atoms, probs).map_err(py_err)?,
            ("rademacher" | "binary", None, None) => IncrementDistribution::rademacher(d),
            ("trinomial", None, None) => IncrementDistribution::trinomial(d),
            _ => return Err(PyValueError::new_err(format!("unknown family `{family}` or incomplete custom law"))),
        };
        Ok(PyTree {
            inner: ScenarioTree::product(horizon, dist).map_err(py_err)?,
        })
    }

    #[getter]
    fn horizon(&self) -> usize {
        self.inner.horizon()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn total_nodes(&self) -> usize {
        self.inner.total_nodes()
    }

    fn level_size(&self, t: usize) -> PyResult<usize> {
        self.check(t)?;
        Ok(self.inner.level_size(t))
    }

    fn node_probability(&self, t: usize, node: usize) -> PyResult<f64> {
        self.check_node(t, node)?;
        Ok(self.inner.node_probability(t, node))
    }

    /// `W_t` at a node.
    fn path_value(&self, t: usize, node: usize) -> PyResult<Vec<f64>> {
        self.check_node(t, node)?;
        Ok(self.inner.path_value(t, node).to_vec())
    }

    fn __repr__(&self) -> String {
        format!("Tree(horizon={}, d={}, nodes={})", self.inner.horizon(), self.inner.dim(), self.inner.total_nodes())
    }
}

impl PyTree {
    fn check(&self, t: usize) -> PyResult<()> {
        if t > self.inner.horizon() {
            return Err(PyValueError::new_err(format!("time {t} beyond horizon {}", self.inner.horizon())));
        }
        Ok(())
    }

    fn check_node(&self, t: usize, node: usize) -> PyResult<()> {
        self.check(t)?;
        if node >= self.inner.level_size(t) {
            return Err(PyValueError::new_err(format!("node {node} out of range at t={t}")));
        }
        Ok(())
    }
}

/// Solves a backward equation with terminal values `terminal` (one list
/// per leaf). `generator(t, node, y, z)` returns a list; `None` means
/// `f = 0`. It must not read `z` at the terminal time.
#[pyfunction]
#[pyo3(signature = (tree, terminal, generator=None))]
fn solve_bsde<'py>(py: Python<'py>, tree: &PyTree, terminal: Vec<Vec<f64>>, generator: Option<Bound<'py, PyAny>>) -> PyResult<Bound<'py, PyDict>> {
    let eta: Vec<DVector<f64>> = terminal.iter().map(|v| DVector::from_column_slice(v)).collect();
    let failure: RefCell<Option<PyErr>> = RefCell::new(None);
    let f = |t: usize, node: usize, y: &DVector<f64>, z: &DMatrix<f64>| -> dsmp::Result<DVector<f64>> {
        let Some(g) = &generator else {
            return Ok(DVector::zeros(y.len()));
        };
        let out = g
            .call1((t, node, y.as_slice().to_vec(), z.as_slice().to_vec()))
            .and_then(|r| r.extract::<Vec<f64>>());
        match out {
            Ok(v) => Ok(DVector::from_vec(v)),
            Err(e) => {
                let msg = e.to_string();
                failure.borrow_mut().get_or_insert(e);
                Err(Error::Precondition(format!("generator raised: {msg}")))
            }
        }
    };
    let raised = || failure.borrow_mut().take();
    let sol = solve_bsde_core(&tree.inner, &f, &eta);
    if let Some(e) = raised() {
        return Err(e);
    }
    let sol = sol.map_err(py_err)?;
    let residual = sol.edge_residual(&tree.inner, &f);
    if let Some(e) = raised() {
        return Err(e);
    }
    let residual = residual.map_err(py_err)?;
    let orth = tree.inner.check_strong_orthogonality(&sol.n, 1e-12);
    let d = PyDict::new(py);
    d.set_item("y", nested(&sol.y))?;
    d.set_item("z", nested(&sol.z))?;
    d.set_item("n", nested(&sol.n))?;
    d.set_item("residual", residual)?;
    d.set_item("orthogonality", orth.max_residual)?;
    Ok(d)
}

/// A control problem loaded from the catalog or a TOML description.
#[pyclass(name = "Problem", frozen)]
struct PyProblem {
    file: ProblemFile,
    inner: ExprProblem,
}

impl PyProblem {
    fn with_model<T>(&self, tree: &PyTree, f: impl FnOnce(&Model) -> PyResult<T>) -> PyResult<T> {
        let model = Model::new(&self.inner, &tree.inner).map_err(py_err)?;
        f(&model)
    }

    fn control(model: &Model, control: Option<Nested>) -> PyResult<AdaptedProcess> {
        let u = match control {
            None => model.zero_control(),
            Some(c) => from_nested(model.tree(), &c, model.dims().r, model.horizon() + 1)?,
        };
        model.check_admissible(&u).map_err(py_err)?;
        Ok(u)
    }
}

#[pymethods]
impl PyProblem {
    #[staticmethod]
    fn catalog(name: &str) -> PyResult<Self> {
        let (file, inner) = catalog::load(name).map_err(py_err)?;
        Ok(PyProblem { file, inner })
    }

    #[staticmethod]
    fn catalog_names() -> Vec<&'static str> {
        catalog::names()
    }

    #[staticmethod]
    fn from_toml(src: &str) -> PyResult<Self> {
        let file = ProblemFile::from_toml(src).map_err(py_err)?;
        let inner = ExprProblem::new(&file, src).map_err(py_err)?;
        Ok(PyProblem { file, inner })
    }

    fn to_toml(&self) -> String {
        self.file.to_toml()
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name.clone()
    }

    /// `(n, m, d, r)`.
    #[getter]
    fn dims(&self) -> (usize, usize, usize, usize) {
        let d = dsmp::problem::ControlProblem::dims(&self.inner);
        (d.n, d.m, d.d, d.r)
    }

    #[getter]
    fn coupling(&self) -> &'static str {
        match dsmp::problem::ControlProblem::coupling(&self.inner) {
            Coupling::Partial => "partial",
            Coupling::Full => "full",
        }
    }

    /// Tree from the problem's `[tree]` block, with optional overrides.
    #[pyo3(signature = (horizon=None, family=None))]
    fn tree(&self, horizon: Option<usize>, family: Option<&str>) -> PyResult<PyTree> {
        Ok(PyTree {
            inner: self.file.build_tree(horizon, family).map_err(py_err)?,
        })
    }

    /// State `(x, y, z, n)` and the largest residual of the system.
    #[pyo3(signature = (tree, control=None))]
    fn solve<'py>(&self, py: Python<'py>, tree: &PyTree, control: Option<Nested>) -> PyResult<Bound<'py, PyDict>> {
        self.with_model(tree, |model| {
            let u = Self::control(model, control)?;
            let sol = solve_state(model, &u, &SolverConfig::default()).map_err(py_err)?;
            let r = residuals(&tree.inner, &ControlledSystem::new(model, &u), &sol).map_err(py_err)?;
            let d = PyDict::new(py);
            d.set_item("x", nested(&sol.x))?;
            d.set_item("y", nested(&sol.y))?;
            d.set_item("z", nested(&sol.z))?;
            d.set_item("n", nested(&sol.n))?;
            d.set_item("residual", r.max())?;
            Ok(d)
        })
    }

    #[pyo3(signature = (tree, control=None))]
    fn cost(&self, tree: &PyTree, control: Option<Nested>) -> PyResult<f64> {
        self.with_model(tree, |model| {
            let u = Self::control(model, control)?;
            cost(model, &u, &SolverConfig::default()).map_err(py_err)
        })
    }

    /// `∇J = -H_u` per node on `t < T`.
    #[pyo3(signature = (tree, control=None))]
    fn gradient(&self, tree: &PyTree, control: Option<Nested>) -> PyResult<Nested> {
        self.with_model(tree, |model| {
            let u = Self::control(model, control)?;
            let ev = evaluate(model, &u, &SolverConfig::default()).map_err(py_err)?;
            Ok(nested(&ev.gradient()))
        })
    }

    /// Adjoint `(p, q, big_q, k)` and the largest residual of its system.
    #[pyo3(signature = (tree, control=None))]
    fn adjoint<'py>(&self, py: Python<'py>, tree: &PyTree, control: Option<Nested>) -> PyResult<Bound<'py, PyDict>> {
        self.with_model(tree, |model| {
            let u = Self::control(model, control)?;
            let cfg = SolverConfig::default();
            let traj = solve_state(model, &u, &cfg).map_err(py_err)?;
            let lin = Linearization::new(model, &traj, &u).map_err(py_err)?;
            let adj = solve_adjoint_with(model, &lin, &cfg).map_err(py_err)?;
            let r = adjoint_residuals(model, &lin, &adj).map_err(py_err)?;
            let d = PyDict::new(py);
            d.set_item("p", nested(&adj.p))?;
            d.set_item("q", nested(&adj.q))?;
            d.set_item("big_q", nested(&adj.big_q))?;
            d.set_item("k", nested(&adj.k))?;
            d.set_item("residual", r.max())?;
            Ok(d)
        })
    }

    /// Maximum-principle certificate: per-node violations and active codes.
    #[pyo3(signature = (tree, control=None, tol=1e-6))]
    fn check_mp<'py>(&self, py: Python<'py>, tree: &PyTree, control: Option<Nested>, tol: f64) -> PyResult<Bound<'py, PyDict>> {
        self.with_model(tree, |model| {
            let u = Self::control(model, control)?;
            let ev = evaluate(model, &u, &SolverConfig::default()).map_err(py_err)?;
            let rep = check_maximum_principle(model, &u, &ev.grad_h, tol);
            let rows: Vec<(usize, usize, f64, String)> = rep.rows.iter().map(|r| (r.t, r.node, r.violation, r.active_string())).collect();
            let d = PyDict::new(py);
            d.set_item("rows", rows)?;
            d.set_item("max_violation", rep.max_violation)?;
            d.set_item("passed", rep.passed)?;
            Ok(d)
        })
    }

    /// Duality identity for a perturbation of size `eps` in direction `dv`
    /// (one list per time-`s` node) at time `s`.
    #[pyo3(signature = (tree, s, dv, eps=0.5, control=None))]
    fn duality(&self, tree: &PyTree, s: usize, dv: Vec<Vec<f64>>, eps: f64, control: Option<Nested>) -> PyResult<(f64, f64, f64)> {
        self.with_model(tree, |model| {
            let u = Self::control(model, control)?;
            let pert = Perturbation {
                s,
                dv: dv.iter().map(|v| DVector::from_column_slice(v)).collect(),
                eps,
            };
            let rep = duality_check(model, &u, &pert, &SolverConfig::default()).map_err(py_err)?;
            Ok((rep.lhs, rep.rhs, rep.gap))
        })
    }

    /// ε-scaling rows `(eps, a_x, a_y, a_z, b_x, b_y, b_z, cost_remainder)`
    /// and fitted slopes (`None` when exact).
    #[pyo3(signature = (tree, s, dv, ladder=None, control=None))]
    fn scaling<'py>(&self, py: Python<'py>, tree: &PyTree, s: usize, dv: Vec<f64>, ladder: Option<Vec<f64>>, control: Option<Nested>) -> PyResult<Bound<'py, PyDict>> {
        self.with_model(tree, |model| {
            let u = Self::control(model, control)?;
            let pert = Perturbation::uniform(&tree.inner, s, &dv, 1.0);
            let ladder = ladder.unwrap_or_else(default_ladder);
            let rep = epsilon_scaling_experiment(model, &u, &pert, &ladder, &SolverConfig::default()).map_err(py_err)?;
            let rows: Vec<[f64; 8]> = rep.rows.iter().map(|r| [r.eps, r.a_x, r.a_y, r.a_z, r.b_x, r.b_y, r.b_z, r.cost_remainder]).collect();
            let sl = rep.slopes;
            let slopes = PyDict::new(py);
            for (k, v) in [("a_x", sl.a_x), ("a_y", sl.a_y), ("a_z", sl.a_z), ("b_x", sl.b_x), ("b_y", sl.b_y), ("b_z", sl.b_z)] {
                slopes.set_item(k, v)?;
            }
            let d = PyDict::new(py);
            d.set_item("rows", rows)?;
            d.set_item("slopes", slopes)?;
            Ok(d)
        })
    }

    /// Projected-gradient minimization from `control` (zero by default).
    #[pyo3(signature = (tree, control=None, tol=1e-8, max_iter=1000))]
    fn optimize<'py>(&self, py: Python<'py>, tree: &PyTree, control: Option<Nested>, tol: f64, max_iter: usize) -> PyResult<Bound<'py, PyDict>> {
        self.with_model(tree, |model| {
            let u = Self::control(model, control)?;
            let cfg = OptimizerConfig {
                initial: Some(u),
                tol,
                max_iter,
                ..OptimizerConfig::default()
            };
            let res = minimize(model, &cfg).map_err(py_err)?;
            let trace: Vec<(usize, f64, f64, f64)> = res.trace.iter().map(|r| (r.iteration, r.cost, r.step, r.mp_residual)).collect();
            let d = PyDict::new(py);
            d.set_item("control", nested(&res.control))?;
            d.set_item("cost", res.evaluation.cost)?;
            d.set_item("mp_residual", res.mp_residual)?;
            d.set_item("iterations", res.iterations)?;
            d.set_item("converged", res.converged(tol))?;
            d.set_item("trace", trace)?;
            Ok(d)
        })
    }

    /// Monotone check; linear-exact unless `samples` is given.
    #[pyo3(signature = (tree, alpha=0.0, samples=None, seed=0, control=None))]
    fn validate_monotone<'py>(&self, py: Python<'py>, tree: &PyTree, alpha: f64, samples: Option<usize>, seed: u64, control: Option<Nested>) -> PyResult<Bound<'py, PyDict>> {
        self.with_model(tree, |model| {
            let u = Self::control(model, control)?;
            let mode = match samples {
                Some(samples) => MonotoneMode::Sampled { samples, seed },
                None => MonotoneMode::LinearExact,
            };
            let rep = check_monotone(model, &u, mode, alpha).map_err(py_err)?;
            let d = PyDict::new(py);
            d.set_item("alpha_estimate", rep.alpha_estimate)?;
            d.set_item("violation", rep.violation)?;
            d.set_item("location", rep.location)?;
            d.set_item("passed", rep.passed)?;
            Ok(d)
        })
    }

    fn __repr__(&self) -> String {
        let (n, m, d, r) = self.dims();
        format!("Problem({:?}, coupling={}, n={n}, m={m}, d={d}, r={r})", self.inner.name, self.coupling())
    }
}

#[pymodule]
fn dsmp_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTree>()?;
    m.add_class::<PyProblem>()?;
    m.add_function(wrap_pyfunction!(solve_bsde, m)?)?;
    Ok(())
}
