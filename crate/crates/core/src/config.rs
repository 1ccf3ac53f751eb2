//! Problem files: a TOML description of a control problem whose
//! coefficients are expressions in `t, T, x, y, z, u, w`.
//!
//! ```toml
//! name = "example"
//! coupling = "partial"          # or "full"
//!
//! [dims]
//! n = 1
//! m = 1
//! d = 1
//! r = 1
//!
//! [tree]
//! family = "rademacher"         # "trinomial" or "custom" (with atoms, probs)
//! horizon = 4
//!
//! [state]
//! x0 = [0.0]
//! y_terminal = ["0"]            # reads x, w, t, T
//!
//! [coefficients]
//! b = ["u"]
//! sigma = [["1"]]               # m rows of d columns
//! f = ["0"]
//! f_terminal = ["0"]            # optional generator at T, may not read z or u
//! l = "x^2 + u^2"
//! h = "x^2"                     # reads x, w, t, T
//!
//! [control]
//! lower = [-inf]
//! upper = [inf]
//! ```

use std::ops::Range;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use toml::Spanned;

use crate::error::{Error, Result};
use crate::expr::{parse, Env, Expr, Scope, Var};
use crate::problem::{ControlBox, ControlProblem, Coupling, Dims, Jacobian, Point};
use crate::tree::{IncrementDistribution, ScenarioTree};

type Exprs = Spanned<Vec<Spanned<String>>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub coupling: Spanned<Coupling>,
    pub dims: Spanned<Dims>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tree: Option<TreeSection>,
    pub state: StateSection,
    pub coefficients: CoefficientSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub control: Option<ControlSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TreeSection {
    pub family: Spanned<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub atoms: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probs: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateSection {
    pub x0: Spanned<Vec<f64>>,
    pub y_terminal: Exprs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoefficientSection {
    pub b: Exprs,
    pub sigma: Spanned<Vec<Vec<Spanned<String>>>>,
    pub f: Exprs,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f_terminal: Option<Exprs>,
    pub l: Spanned<String>,
    pub h: Spanned<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lower: Option<Spanned<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub upper: Option<Spanned<Vec<f64>>>,
}

/// 1-based line of a byte offset.
fn line_of(src: &str, offset: usize) -> usize {
    src[..offset.min(src.len())].matches('\n').count() + 1
}

fn config_at(src: &str, span: Range<usize>, field: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Config {
        field: field.into(),
        line: (!src.is_empty()).then(|| line_of(src, span.start)),
        message: message.into(),
    }
}

/// Guesses the offending field of a TOML error from its message and the
/// source around its span.
fn field_of(src: &str, err: &toml::de::Error) -> String {
    let msg = err.message();
    if let Some(rest) = msg.split("missing field `").nth(1) {
        return rest.split('`').next().unwrap_or("?").to_string();
    }
    if let Some(rest) = msg.split("unknown field `").nth(1) {
        return rest.split('`').next().unwrap_or("?").to_string();
    }
    if let Some(span) = err.span() {
        let line_start = src[..span.start.min(src.len())].rfind('\n').map_or(0, |i| i + 1);
        let line = &src[line_start..];
        if let Some((key, _)) = line.split_once('=') {
            return key.trim().to_string();
        }
    }
    "document".to_string()
}

impl ProblemFile {
    pub fn from_toml(src: &str) -> Result<Self> {
        toml::from_str(src).map_err(|e| Error::Config {
            field: field_of(src, &e),
            line: e.span().map(|s| line_of(src, s.start)),
            message: e.message().trim().to_string(),
        })
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let src = std::fs::read_to_string(path).map_err(|e| Error::config("config", format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&src)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("problem files always serialize")
    }

    /// Builds the tree described by the `[tree]` section, with optional
    /// overrides for the horizon and family.
    pub fn build_tree(&self, horizon: Option<usize>, family: Option<&str>) -> Result<ScenarioTree> {
        let d = self.dims.get_ref().d;
        let section = self.tree.as_ref();
        let family = family
            .map(str::to_string)
            .or_else(|| section.map(|s| s.family.get_ref().clone()))
            .unwrap_or_else(|| "rademacher".to_string());
        let horizon = horizon
            .or_else(|| section.and_then(|s| s.horizon))
            .ok_or_else(|| Error::config("tree.horizon", "no horizon given in the file or on the command line"))?;
        let dist = match family.as_str() {
            "rademacher" | "binary" => IncrementDistribution::rademacher(d),
            "trinomial" => IncrementDistribution::trinomial(d),
            "custom" => {
                let s = section.ok_or_else(|| Error::config("tree", "custom family needs a [tree] section"))?;
                let atoms = s.atoms.clone().ok_or_else(|| Error::config("tree.atoms", "custom family needs atoms"))?;
                let probs = s.probs.clone().ok_or_else(|| Error::config("tree.probs", "custom family needs probs"))?;
                if atoms.iter().any(|a| a.len() != d) {
                    return Err(Error::config("tree.atoms", format!("every atom must have d = {d} components")));
                }
                IncrementDistribution::new(atoms, probs)?
            }
            other => {
                return Err(Error::config(
                    "tree.family",
                    format!("unknown family `{other}` (expected rademacher, trinomial or custom)"),
                ))
            }
        };
        ScenarioTree::product(horizon, dist)
    }
}

/// Partials of a list of expressions, one `rows × len` table per variable
/// family.
#[derive(Debug, Clone)]
struct Partials {
    x: Vec<Vec<Expr>>,
    y: Vec<Vec<Expr>>,
    z: Vec<Vec<Expr>>,
    u: Vec<Vec<Expr>>,
}

impl Partials {
    fn new(exprs: &[Expr], dims: &Dims, x_dim: usize) -> Self {
        let table = |len: usize, var: fn(usize) -> Var| -> Vec<Vec<Expr>> {
            exprs.iter().map(|e| (0..len).map(|j| e.derivative(var(j))).collect()).collect()
        };
        Partials {
            x: table(x_dim, Var::X),
            y: table(dims.n, Var::Y),
            z: table(dims.n * dims.d, Var::Z),
            u: table(dims.r, Var::U),
        }
    }

    fn eval(&self, env: &Env) -> Jacobian {
        let block = |t: &Vec<Vec<Expr>>| {
            let cols = t.first().map_or(0, Vec::len);
            DMatrix::from_fn(t.len(), cols, |i, j| t[i][j].eval(env))
        };
        Jacobian {
            x: block(&self.x),
            y: block(&self.y),
            z: block(&self.z),
            u: block(&self.u),
        }
    }
}

/// A [`ControlProblem`] built from a [`ProblemFile`] with symbolic partials.
#[derive(Debug, Clone)]
pub struct ExprProblem {
    pub name: String,
    dims: Dims,
    coupling: Coupling,
    x0: DVector<f64>,
    b: Vec<Expr>,
    /// Column-major `vec σ`.
    sigma: Vec<Expr>,
    f: Vec<Expr>,
    f_terminal: Option<Vec<Expr>>,
    l: Expr,
    h: Expr,
    y_terminal: Vec<Expr>,
    bounds: ControlBox,
    db: Partials,
    ds: Partials,
    df: Partials,
    dft: Option<Partials>,
    dl: Partials,
    dh: Vec<Expr>,
    dy_terminal: Vec<Vec<Expr>>,
}

fn parse_list(src: &str, field: &str, list: &Exprs, len: usize, scope: &Scope) -> Result<Vec<Expr>> {
    if list.get_ref().len() != len {
        return Err(config_at(src, list.span(), field, format!("expected {len} expressions, found {}", list.get_ref().len())));
    }
    list.get_ref().iter().enumerate().map(|(i, e)| parse_one(src, &format!("{field}[{i}]"), e, scope)).collect()
}

fn parse_one(src: &str, field: &str, e: &Spanned<String>, scope: &Scope) -> Result<Expr> {
    parse(e.get_ref(), scope).map_err(|err| config_at(src, e.span(), field, format!("`{}`: {err}", e.get_ref())))
}

impl ExprProblem {
    /// Validates and compiles `file`; `src` is the text it came from and is
    /// only used to attach line numbers to errors.
    pub fn new(file: &ProblemFile, src: &str) -> Result<Self> {
        let dims = *file.dims.get_ref();
        for (name, v) in [("n", dims.n), ("m", dims.m), ("d", dims.d), ("r", dims.r)] {
            if v == 0 {
                return Err(config_at(src, file.dims.span(), format!("dims.{name}"), format!("{name} must be at least 1")));
            }
        }
        let coupling = *file.coupling.get_ref();
        if coupling == Coupling::Full && dims.m != dims.n {
            return Err(config_at(src, file.dims.span(), "dims.m", "full coupling needs m = n"));
        }
        let Dims { n, m, d, r } = dims;
        let full = Scope { x: m, y: n, z: (n, d), u: r, w: d };
        let terminal = Scope { x: m, y: 0, z: (0, 0), u: 0, w: d };
        let gen_terminal = Scope { x: m, y: n, z: (0, 0), u: 0, w: d };
        let x0 = file.state.x0.get_ref();
        if x0.len() != m {
            return Err(config_at(src, file.state.x0.span(), "state.x0", format!("expected {m} values, found {}", x0.len())));
        }
        let c = &file.coefficients;
        let b = parse_list(src, "coefficients.b", &c.b, m, &full)?;
        let rows = c.sigma.get_ref();
        if rows.len() != m || rows.iter().any(|row| row.len() != d) {
            return Err(config_at(src, c.sigma.span(), "coefficients.sigma", format!("expected {m} rows of {d} expressions")));
        }
        let mut sigma = Vec::with_capacity(m * d);
        for j in 0..d {
            for (i, row) in rows.iter().enumerate() {
                sigma.push(parse_one(src, &format!("coefficients.sigma[{i}][{j}]"), &row[j], &full)?);
            }
        }
        let f = parse_list(src, "coefficients.f", &c.f, n, &full)?;
        let f_terminal = c
            .f_terminal
            .as_ref()
            .map(|ft| parse_list(src, "coefficients.f_terminal", ft, n, &gen_terminal))
            .transpose()?;
        let l = parse_one(src, "coefficients.l", &c.l, &full)?;
        let h = parse_one(src, "coefficients.h", &c.h, &terminal)?;
        let y_terminal = parse_list(src, "state.y_terminal", &file.state.y_terminal, n, &terminal)?;
        let bounds = match &file.control {
            None => ControlBox::unbounded(r),
            Some(ctrl) => {
                let side = |v: &Option<Spanned<Vec<f64>>>, field: &str, fill: f64| -> Result<Vec<f64>> {
                    match v {
                        None => Ok(vec![fill; r]),
                        Some(s) if s.get_ref().len() == r => Ok(s.get_ref().clone()),
                        Some(s) => Err(config_at(src, s.span(), field, format!("expected {r} bounds, found {}", s.get_ref().len()))),
                    }
                };
                let lower = side(&ctrl.lower, "control.lower", f64::NEG_INFINITY)?;
                let upper = side(&ctrl.upper, "control.upper", f64::INFINITY)?;
                ControlBox::new(lower, upper).map_err(|e| {
                    let span = ctrl.lower.as_ref().or(ctrl.upper.as_ref()).map_or(0..0, |s| s.span());
                    config_at(src, span, "control", e.to_string())
                })?
            }
        };
        let db = Partials::new(&b, &dims, m);
        let ds = Partials::new(&sigma, &dims, m);
        let df = Partials::new(&f, &dims, m);
        let dft = f_terminal.as_ref().map(|ft| Partials::new(ft, &dims, m));
        let dl = Partials::new(std::slice::from_ref(&l), &dims, m);
        let dh = (0..m).map(|i| h.derivative(Var::X(i))).collect();
        let dy_terminal = y_terminal.iter().map(|e| (0..m).map(|i| e.derivative(Var::X(i))).collect()).collect();
        Ok(ExprProblem {
            name: file.name.clone().unwrap_or_else(|| "custom".into()),
            dims,
            coupling,
            x0: DVector::from_column_slice(x0),
            b,
            sigma,
            f,
            f_terminal,
            l,
            h,
            y_terminal,
            bounds,
            db,
            ds,
            df,
            dft,
            dl,
            dh,
            dy_terminal,
        })
    }

    /// Parses and compiles a TOML problem description.
    pub fn from_toml(src: &str) -> Result<Self> {
        Self::new(&ProblemFile::from_toml(src)?, src)
    }

    fn env<'a>(p: &Point<'a>) -> Env<'a> {
        Env {
            t: p.t as f64,
            horizon: p.horizon as f64,
            x: p.x,
            y: p.y,
            z: p.z,
            u: p.u,
            w: p.w,
        }
    }

    fn eval_all(exprs: &[Expr], env: &Env) -> DVector<f64> {
        DVector::from_iterator(exprs.len(), exprs.iter().map(|e| e.eval(env)))
    }

    fn at_terminal(&self, p: &Point) -> bool {
        p.t >= p.horizon && self.f_terminal.is_some()
    }
}

impl ControlProblem for ExprProblem {
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
        Self::eval_all(&self.b, &Self::env(p))
    }
    fn diffusion(&self, p: &Point) -> DMatrix<f64> {
        let v = Self::eval_all(&self.sigma, &Self::env(p));
        DMatrix::from_column_slice(self.dims.m, self.dims.d, v.as_slice())
    }
    fn generator(&self, p: &Point) -> DVector<f64> {
        let env = Self::env(p);
        match (&self.f_terminal, self.at_terminal(p)) {
            (Some(ft), true) => Self::eval_all(ft, &env),
            _ => Self::eval_all(&self.f, &env),
        }
    }
    fn running_cost(&self, p: &Point) -> f64 {
        self.l.eval(&Self::env(p))
    }
    fn terminal_cost(&self, p: &Point) -> f64 {
        self.h.eval(&Self::env(p))
    }
    fn terminal_value(&self, p: &Point) -> DVector<f64> {
        Self::eval_all(&self.y_terminal, &Self::env(p))
    }
    fn control_box(&self, _t: usize) -> ControlBox {
        self.bounds.clone()
    }
    fn drift_jacobian(&self, p: &Point) -> Option<Jacobian> {
        Some(self.db.eval(&Self::env(p)))
    }
    fn diffusion_jacobian(&self, p: &Point) -> Option<Jacobian> {
        Some(self.ds.eval(&Self::env(p)))
    }
    fn generator_jacobian(&self, p: &Point) -> Option<Jacobian> {
        let env = Self::env(p);
        match (&self.dft, self.at_terminal(p)) {
            (Some(dft), true) => Some(dft.eval(&env)),
            _ => Some(self.df.eval(&env)),
        }
    }
    fn running_cost_gradient(&self, p: &Point) -> Option<Jacobian> {
        Some(self.dl.eval(&Self::env(p)))
    }
    fn terminal_cost_gradient(&self, p: &Point) -> Option<DVector<f64>> {
        Some(Self::eval_all(&self.dh, &Self::env(p)))
    }
    fn terminal_value_jacobian(&self, p: &Point) -> Option<DMatrix<f64>> {
        let env = Self::env(p);
        let (n, m) = (self.dims.n, self.dims.m);
        Some(DMatrix::from_fn(n, m, |i, j| self.dy_terminal[i][j].eval(&env)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fbsde::{solve_state, SolverConfig};
    use crate::problem::Model;

    const LQ: &str = r#"
name = "lq"
coupling = "partial"

[dims]
n = 1
m = 1
d = 1
r = 1

[tree]
family = "rademacher"
horizon = 3

[state]
x0 = [0.0]
y_terminal = ["0"]

[coefficients]
b = ["u"]
sigma = [["1"]]
f = ["0"]
l = "x^2 + u^2"
h = "x^2"
"#;

    fn with(replace: &str, by: &str) -> String {
        assert!(LQ.contains(replace));
        LQ.replacen(replace, by, 1)
    }

    fn config_err(src: &str) -> (String, Option<usize>, String) {
        let err = match ProblemFile::from_toml(src).and_then(|f| ExprProblem::new(&f, src).map(|_| ())) {
            Ok(()) => panic!("expected a config error"),
            Err(e) => e,
        };
        match err {
            Error::Config { field, line, message } => (field, line, message),
            other => panic!("not a config error: {other}"),
        }
    }

    #[test]
    fn loads_and_matches_the_linear_problem() {
        let file = ProblemFile::from_toml(LQ).unwrap();
        let p = ExprProblem::new(&file, LQ).unwrap();
        let tree = file.build_tree(None, None).unwrap();
        assert_eq!(tree.horizon(), 3);
        let model = Model::new(&p, &tree).unwrap();
        let lin = crate::linear::LinearProblem::scalar_lq();
        let lin_model = Model::new(&lin, &tree).unwrap();
        let u = crate::tree::AdaptedProcess::from_fn(&tree, 1, 1, 4, |t, a| vec![0.1 * t as f64 - 0.2 * a as f64]);
        let cfg = SolverConfig::default();
        let a = solve_state(&model, &u, &cfg).unwrap();
        let b = solve_state(&lin_model, &u, &cfg).unwrap();
        assert!(a.x.sup_distance(&b.x) < 1e-15);
        let ca = crate::optimizer::cost(&model, &u, &cfg).unwrap();
        let cb = crate::optimizer::cost(&lin_model, &u, &cfg).unwrap();
        assert!((ca - cb).abs() < 1e-13);
    }

    #[test]
    fn round_trip_is_exact() {
        let file = ProblemFile::from_toml(LQ).unwrap();
        let text = file.to_toml();
        let again = ProblemFile::from_toml(&text).unwrap();
        assert_eq!(again.to_toml(), text);
        assert_eq!(again.dims.get_ref(), file.dims.get_ref());
    }

    #[test]
    fn zero_dimension_is_named() {
        let (field, line, _) = config_err(&with("d = 1", "d = 0"));
        assert_eq!(field, "dims.d");
        assert_eq!(line, Some(5));
    }

    #[test]
    fn bad_expressions_carry_lines() {
        let (field, line, message) = config_err(&with("l = \"x^2 + u^2\"", "l = \"x^2 + q\""));
        assert_eq!(field, "coefficients.l");
        assert_eq!(line, Some(23));
        assert!(message.contains("unknown variable `q`"), "{message}");
        let (field, ..) = config_err(&with("h = \"x^2\"", "h = \"x^2 + u\""));
        assert_eq!(field, "coefficients.h");
    }

    #[test]
    fn toml_errors_carry_lines() {
        let (field, line, _) = config_err(&with("[dims]\nn = 1", "[dims]\nn = \"one\""));
        assert_eq!(field, "n");
        assert_eq!(line, Some(6));
        let (field, ..) = config_err(&with("h = \"x^2\"\n", ""));
        assert_eq!(field, "h");
        let (field, ..) = config_err(&with("name = \"lq\"", "name = \"lq\"\nsolver = 1"));
        assert_eq!(field, "solver");
    }

    #[test]
    fn coupling_probe_runs_on_files() {
        let src = with("b = [\"u\"]", "b = [\"u + y\"]");
        let file = ProblemFile::from_toml(&src).unwrap();
        let p = ExprProblem::new(&file, &src).unwrap();
        let tree = file.build_tree(None, None).unwrap();
        assert!(matches!(Model::new(&p, &tree), Err(Error::CouplingViolation { coefficient: "b", .. })));
    }

    #[test]
    fn boxes_and_terminal_generator() {
        let src = format!("{LQ}\n[control]\nlower = [-1.0]\nupper = [inf]\n");
        let p = ExprProblem::from_toml(&src).unwrap();
        assert_eq!(p.control_box(0).lower, vec![-1.0]);
        assert!(p.control_box(0).upper[0].is_infinite());
        let src = format!("{LQ}\n[control]\nlower = [1.0]\nupper = [0.0]\n");
        assert_eq!(config_err(&src).0, "control");

        let src = with("f = [\"0\"]", "f = [\"z\"]\nf_terminal = [\"z\"]");
        assert_eq!(config_err(&src).0, "coefficients.f_terminal[0]");
        let src = with("f = [\"0\"]", "f = [\"z + y\"]\nf_terminal = [\"2*y\"]");
        let file = ProblemFile::from_toml(&src).unwrap();
        let p = ExprProblem::new(&file, &src).unwrap();
        let tree = file.build_tree(None, None).unwrap();
        assert!(Model::new(&p, &tree).is_ok());
    }

    #[test]
    fn tree_overrides() {
        let file = ProblemFile::from_toml(LQ).unwrap();
        let tree = file.build_tree(Some(5), Some("trinomial")).unwrap();
        assert_eq!((tree.horizon(), tree.branching(0)), (5, 3));
        assert!(file.build_tree(None, Some("pentanomial")).is_err());
    }
}
