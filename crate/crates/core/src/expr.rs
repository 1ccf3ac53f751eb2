//! Coefficient expressions for problem files.
//!
//! Grammar: numbers, variables, `+ - * / ^`, parentheses, unary minus and
//! the functions `tanh exp log sin cos sqrt abs` (one argument) and
//! `min max` (two arguments). Expressions are parsed once, differentiated
//! symbolically and evaluated node by node; nothing else is executable.

use std::fmt;

/// Variable slots an expression can read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Var {
    /// Current time `t`.
    Time,
    /// Horizon `T`.
    Horizon,
    X(usize),
    Y(usize),
    /// Entry of `z` in column-major order.
    Z(usize),
    U(usize),
    /// Component of the path value `W_t`.
    W(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Tanh,
    Exp,
    Log,
    Sin,
    Cos,
    Sqrt,
    Abs,
}

impl Func {
    fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "tanh" => Func::Tanh,
            "exp" => Func::Exp,
            "log" => Func::Log,
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "sqrt" => Func::Sqrt,
            "abs" => Func::Abs,
            _ => return None,
        })
    }

    fn apply(self, v: f64) -> f64 {
        match self {
            Func::Tanh => v.tanh(),
            Func::Exp => v.exp(),
            Func::Log => v.ln(),
            Func::Sin => v.sin(),
            Func::Cos => v.cos(),
            Func::Sqrt => v.sqrt(),
            Func::Abs => v.abs(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Var(Var),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, Box<Expr>),
    Call(Func, Box<Expr>),
    Min(Box<Expr>, Box<Expr>),
    Max(Box<Expr>, Box<Expr>),
    /// `if a <= b { then } else { otherwise }`; appears in derivatives of
    /// `min`, `max` and `abs`.
    IfLe(Box<Expr>, Box<Expr>, Box<Expr>, Box<Expr>),
}

/// Values bound to the variable slots.
#[derive(Debug, Clone, Copy)]
pub struct Env<'a> {
    pub t: f64,
    pub horizon: f64,
    pub x: &'a [f64],
    pub y: &'a [f64],
    pub z: &'a [f64],
    pub u: &'a [f64],
    pub w: &'a [f64],
}

impl Env<'_> {
    fn get(&self, v: Var) -> f64 {
        match v {
            Var::Time => self.t,
            Var::Horizon => self.horizon,
            Var::X(i) => self.x[i],
            Var::Y(i) => self.y[i],
            Var::Z(i) => self.z[i],
            Var::U(i) => self.u[i],
            Var::W(i) => self.w[i],
        }
    }
}

fn num(v: f64) -> Expr {
    Expr::Num(v)
}

fn is_num(e: &Expr, v: f64) -> bool {
    matches!(e, Expr::Num(x) if *x == v)
}

fn add(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Expr::Num(x), Expr::Num(y)) => num(x + y),
        _ if is_num(&a, 0.0) => b,
        _ if is_num(&b, 0.0) => a,
        _ => Expr::Add(Box::new(a), Box::new(b)),
    }
}

fn sub(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Expr::Num(x), Expr::Num(y)) => num(x - y),
        _ if is_num(&b, 0.0) => a,
        _ if is_num(&a, 0.0) => neg(b),
        _ => Expr::Sub(Box::new(a), Box::new(b)),
    }
}

fn mul(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Expr::Num(x), Expr::Num(y)) => num(x * y),
        _ if is_num(&a, 0.0) || is_num(&b, 0.0) => num(0.0),
        _ if is_num(&a, 1.0) => b,
        _ if is_num(&b, 1.0) => a,
        _ => Expr::Mul(Box::new(a), Box::new(b)),
    }
}

fn div(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        _ if is_num(&a, 0.0) => num(0.0),
        _ if is_num(&b, 1.0) => a,
        _ => Expr::Div(Box::new(a), Box::new(b)),
    }
}

fn neg(a: Expr) -> Expr {
    match a {
        Expr::Num(x) => num(-x),
        Expr::Neg(inner) => *inner,
        other => Expr::Neg(Box::new(other)),
    }
}

fn call(f: Func, a: Expr) -> Expr {
    match a {
        Expr::Num(x) => num(f.apply(x)),
        other => Expr::Call(f, Box::new(other)),
    }
}

fn if_le(a: Expr, b: Expr, then: Expr, otherwise: Expr) -> Expr {
    if then == otherwise {
        return then;
    }
    Expr::IfLe(Box::new(a), Box::new(b), Box::new(then), Box::new(otherwise))
}

impl Expr {
    pub fn eval(&self, env: &Env) -> f64 {
        match self {
            Expr::Num(v) => *v,
            Expr::Var(v) => env.get(*v),
            Expr::Neg(a) => -a.eval(env),
            Expr::Add(a, b) => a.eval(env) + b.eval(env),
            Expr::Sub(a, b) => a.eval(env) - b.eval(env),
            Expr::Mul(a, b) => a.eval(env) * b.eval(env),
            Expr::Div(a, b) => a.eval(env) / b.eval(env),
            Expr::Pow(a, b) => {
                let base = a.eval(env);
                match **b {
                    Expr::Num(e) if e.fract() == 0.0 && e.abs() < 64.0 => base.powi(e as i32),
                    _ => base.powf(b.eval(env)),
                }
            }
            Expr::Call(f, a) => f.apply(a.eval(env)),
            Expr::Min(a, b) => a.eval(env).min(b.eval(env)),
            Expr::Max(a, b) => a.eval(env).max(b.eval(env)),
            Expr::IfLe(a, b, then, otherwise) => {
                if a.eval(env) <= b.eval(env) {
                    then.eval(env)
                } else {
                    otherwise.eval(env)
                }
            }
        }
    }

    /// True if the expression reads `var`.
    pub fn depends_on(&self, var: Var) -> bool {
        match self {
            Expr::Num(_) => false,
            Expr::Var(v) => *v == var,
            Expr::Neg(a) | Expr::Call(_, a) => a.depends_on(var),
            Expr::Add(a, b)
            | Expr::Sub(a, b)
            | Expr::Mul(a, b)
            | Expr::Div(a, b)
            | Expr::Pow(a, b)
            | Expr::Min(a, b)
            | Expr::Max(a, b) => a.depends_on(var) || b.depends_on(var),
            Expr::IfLe(a, b, c, d) => {
                a.depends_on(var) || b.depends_on(var) || c.depends_on(var) || d.depends_on(var)
            }
        }
    }

    /// Symbolic partial derivative with respect to `var`.
    pub fn derivative(&self, var: Var) -> Expr {
        match self {
            Expr::Num(_) => num(0.0),
            Expr::Var(v) => num(if *v == var { 1.0 } else { 0.0 }),
            Expr::Neg(a) => neg(a.derivative(var)),
            Expr::Add(a, b) => add(a.derivative(var), b.derivative(var)),
            Expr::Sub(a, b) => sub(a.derivative(var), b.derivative(var)),
            Expr::Mul(a, b) => add(
                mul(a.derivative(var), (**b).clone()),
                mul((**a).clone(), b.derivative(var)),
            ),
            Expr::Div(a, b) => {
                let da = a.derivative(var);
                let db = b.derivative(var);
                if is_num(&db, 0.0) {
                    div(da, (**b).clone())
                } else {
                    div(
                        sub(mul(da, (**b).clone()), mul((**a).clone(), db)),
                        Expr::Pow(b.clone(), Box::new(num(2.0))),
                    )
                }
            }
            Expr::Pow(a, b) => {
                let da = a.derivative(var);
                if let Expr::Num(e) = **b {
                    if e == 0.0 {
                        return num(0.0);
                    }
                    let lowered = if e == 2.0 {
                        (**a).clone()
                    } else {
                        Expr::Pow(a.clone(), Box::new(num(e - 1.0)))
                    };
                    return mul(mul(num(e), lowered), da);
                }
                // a^b (b' ln a + b a'/a)
                let db = b.derivative(var);
                let inner = add(
                    mul(db, call(Func::Log, (**a).clone())),
                    div(mul((**b).clone(), da), (**a).clone()),
                );
                mul(self.clone(), inner)
            }
            Expr::Call(f, a) => {
                let da = a.derivative(var);
                if is_num(&da, 0.0) {
                    return num(0.0);
                }
                let arg = (**a).clone();
                let outer = match f {
                    Func::Tanh => sub(num(1.0), Expr::Pow(Box::new(call(Func::Tanh, arg)), Box::new(num(2.0)))),
                    Func::Exp => call(Func::Exp, arg),
                    Func::Log => div(num(1.0), arg),
                    Func::Sin => call(Func::Cos, arg),
                    Func::Cos => neg(call(Func::Sin, arg)),
                    Func::Sqrt => div(num(0.5), call(Func::Sqrt, arg)),
                    Func::Abs => if_le(arg, num(0.0), num(-1.0), num(1.0)),
                };
                mul(outer, da)
            }
            Expr::Min(a, b) => if_le(
                (**a).clone(),
                (**b).clone(),
                a.derivative(var),
                b.derivative(var),
            ),
            Expr::Max(a, b) => if_le(
                (**a).clone(),
                (**b).clone(),
                b.derivative(var),
                a.derivative(var),
            ),
            Expr::IfLe(a, b, c, d) => if_le(
                (**a).clone(),
                (**b).clone(),
                c.derivative(var),
                d.derivative(var),
            ),
        }
    }
}

/// Which variable families may appear, with their sizes.
#[derive(Debug, Clone, Copy)]
pub struct Scope {
    pub x: usize,
    pub y: usize,
    /// `(rows, cols)` of `z`.
    pub z: (usize, usize),
    pub u: usize,
    pub w: usize,
}

impl Scope {
    fn resolve(&self, name: &str) -> Option<Var> {
        match name {
            "t" => return Some(Var::Time),
            "T" => return Some(Var::Horizon),
            _ => {}
        }
        let (head, tail) = name.split_at(1);
        let single = |len: usize| -> Option<usize> {
            if tail.is_empty() {
                (len == 1).then_some(0)
            } else {
                let i: usize = tail.parse().ok()?;
                (i >= 1 && i <= len).then(|| i - 1)
            }
        };
        match head {
            "x" => single(self.x).map(Var::X),
            "y" => single(self.y).map(Var::Y),
            "u" => single(self.u).map(Var::U),
            "w" => single(self.w).map(Var::W),
            "z" => {
                let (rows, cols) = self.z;
                if rows * cols == 0 {
                    return None;
                }
                if let Some((r, c)) = tail.split_once('_') {
                    let r: usize = r.parse().ok()?;
                    let c: usize = c.parse().ok()?;
                    if r >= 1 && r <= rows && c >= 1 && c <= cols {
                        return Some(Var::Z((c - 1) * rows + (r - 1)));
                    }
                    return None;
                }
                if tail.is_empty() {
                    return (rows * cols == 1).then_some(Var::Z(0));
                }
                // a single index is allowed when z is a row or a column
                let i: usize = tail.parse().ok()?;
                let len = if rows == 1 { cols } else if cols == 1 { rows } else { 0 };
                (i >= 1 && i <= len).then(|| Var::Z(i - 1))
            }
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParseError {
    pub column: usize,
    pub message: String,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "column {}: {}", self.column, self.message)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Num(f64),
    Ident(String),
    Op(char),
}

fn tokenize(src: &str) -> Result<Vec<(usize, Token)>, ParseError> {
    let chars: Vec<char> = src.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() || c == '.' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                i += 1;
            }
            if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                let mut j = i + 1;
                if j < chars.len() && (chars[j] == '+' || chars[j] == '-') {
                    j += 1;
                }
                if j < chars.len() && chars[j].is_ascii_digit() {
                    i = j;
                    while i < chars.len() && chars[i].is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            let text: String = chars[start..i].iter().collect();
            let v: f64 = text.parse().map_err(|_| ParseError {
                column: start + 1,
                message: format!("bad number `{text}`"),
            })?;
            out.push((start + 1, Token::Num(v)));
        } else if c.is_ascii_alphabetic() {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            out.push((start + 1, Token::Ident(chars[start..i].iter().collect())));
        } else if "+-*/^(),".contains(c) {
            out.push((i + 1, Token::Op(c)));
            i += 1;
        } else {
            return Err(ParseError {
                column: i + 1,
                message: format!("unexpected character `{c}`"),
            });
        }
    }
    Ok(out)
}

struct Parser<'s> {
    tokens: Vec<(usize, Token)>,
    pos: usize,
    scope: &'s Scope,
    end: usize,
}

impl Parser<'_> {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos).map(|(_, t)| t)
    }

    fn column(&self) -> usize {
        self.tokens.get(self.pos).map(|(c, _)| *c).unwrap_or(self.end)
    }

    fn error<T>(&self, message: impl Into<String>) -> Result<T, ParseError> {
        Err(ParseError {
            column: self.column(),
            message: message.into(),
        })
    }

    fn eat(&mut self, op: char) -> bool {
        if self.peek() == Some(&Token::Op(op)) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, op: char) -> Result<(), ParseError> {
        if self.eat(op) {
            Ok(())
        } else {
            self.error(format!("expected `{op}`"))
        }
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.term()?;
        loop {
            if self.eat('+') {
                lhs = Expr::Add(Box::new(lhs), Box::new(self.term()?));
            } else if self.eat('-') {
                lhs = Expr::Sub(Box::new(lhs), Box::new(self.term()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.unary()?;
        loop {
            if self.eat('*') {
                lhs = Expr::Mul(Box::new(lhs), Box::new(self.unary()?));
            } else if self.eat('/') {
                lhs = Expr::Div(Box::new(lhs), Box::new(self.unary()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        if self.eat('-') {
            Ok(Expr::Neg(Box::new(self.unary()?)))
        } else if self.eat('+') {
            self.unary()
        } else {
            self.power()
        }
    }

    fn power(&mut self) -> Result<Expr, ParseError> {
        let base = self.primary()?;
        if self.eat('^') {
            let exponent = self.unary()?;
            Ok(Expr::Pow(Box::new(base), Box::new(exponent)))
        } else {
            Ok(base)
        }
    }

    fn primary(&mut self) -> Result<Expr, ParseError> {
        match self.peek().cloned() {
            Some(Token::Num(v)) => {
                self.pos += 1;
                Ok(Expr::Num(v))
            }
            Some(Token::Op('(')) => {
                self.pos += 1;
                let e = self.expr()?;
                self.expect(')')?;
                Ok(e)
            }
            Some(Token::Ident(name)) => {
                let column = self.column();
                self.pos += 1;
                if self.eat('(') {
                    let first = self.expr()?;
                    let out = if name == "min" || name == "max" {
                        self.expect(',')?;
                        let second = self.expr()?;
                        if name == "min" {
                            Expr::Min(Box::new(first), Box::new(second))
                        } else {
                            Expr::Max(Box::new(first), Box::new(second))
                        }
                    } else if let Some(f) = Func::from_name(&name) {
                        Expr::Call(f, Box::new(first))
                    } else {
                        return Err(ParseError {
                            column,
                            message: format!("unknown function `{name}`"),
                        });
                    };
                    self.expect(')')?;
                    Ok(out)
                } else if name == "pi" {
                    Ok(Expr::Num(std::f64::consts::PI))
                } else {
                    self.scope.resolve(&name).map(Expr::Var).ok_or(ParseError {
                        column,
                        message: format!("unknown variable `{name}`"),
                    })
                }
            }
            Some(Token::Op(c)) => self.error(format!("unexpected `{c}`")),
            None => self.error("unexpected end of expression"),
        }
    }
}

/// Parses `src` with the variables allowed by `scope`.
pub fn parse(src: &str, scope: &Scope) -> Result<Expr, ParseError> {
    let tokens = tokenize(src)?;
    let mut p = Parser {
        tokens,
        pos: 0,
        scope,
        end: src.chars().count() + 1,
    };
    let e = p.expr()?;
    if p.pos != p.tokens.len() {
        return p.error("trailing input");
    }
    Ok(e)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SCOPE: Scope = Scope {
        x: 2,
        y: 1,
        z: (1, 1),
        u: 1,
        w: 1,
    };

    fn env<'a>(x: &'a [f64], u: &'a [f64]) -> Env<'a> {
        Env {
            t: 2.0,
            horizon: 5.0,
            x,
            y: &[0.5],
            z: &[-0.25],
            u,
            w: &[1.0],
        }
    }

    #[test]
    fn precedence_and_power() {
        let e = parse("1 + 2 * 3 ^ 2 - -4 / 2", &SCOPE).unwrap();
        assert_eq!(e.eval(&env(&[0.0, 0.0], &[0.0])), 1.0 + 18.0 + 2.0);
        let e = parse("-x1^2", &SCOPE).unwrap();
        assert_eq!(e.eval(&env(&[3.0, 0.0], &[0.0])), -9.0);
        let e = parse("2^3^2", &SCOPE).unwrap();
        assert_eq!(e.eval(&env(&[0.0, 0.0], &[0.0])), 512.0);
        let e = parse("max(t, T) * min(y, z) + w + 1.5e-1", &SCOPE).unwrap();
        assert!((e.eval(&env(&[0.0, 0.0], &[0.0])) - (5.0 * -0.25 + 1.0 + 0.15)).abs() < 1e-15);
    }

    #[test]
    fn errors_carry_columns() {
        let err = parse("x1 + q", &SCOPE).unwrap_err();
        assert_eq!(err.column, 6);
        let err = parse("x3", &SCOPE).unwrap_err();
        assert!(err.message.contains("x3"));
        assert!(parse("foo(x1)", &SCOPE).is_err());
        assert!(parse("(x1", &SCOPE).is_err());
        assert!(parse("x1 $", &SCOPE).is_err());
        assert!(parse("x1 x2", &SCOPE).is_err());
    }

    #[test]
    fn derivatives_match_central_differences() {
        let sources = [
            "tanh(x1 * u) + exp(-x2^2) / (1 + u^2)",
            "log(2 + sin(x1)) * cos(x2) + sqrt(3 + x1^2)",
            "x1^u + abs(x2 - 0.1)",
            "max(x1, x2) - min(x1 * x2, u)",
        ];
        let x = [0.3, -0.7];
        let u = [1.3];
        for src in sources {
            let e = parse(src, &SCOPE).unwrap();
            for var in [Var::X(0), Var::X(1), Var::U(0)] {
                let d = e.derivative(var).eval(&env(&x, &u));
                let h = 1e-6;
                let shifted = |s: f64| {
                    let mut xs = x;
                    let mut us = u;
                    match var {
                        Var::X(i) => xs[i] += s,
                        Var::U(i) => us[i] += s,
                        _ => unreachable!(),
                    }
                    e.eval(&env(&xs, &us))
                };
                let fd = (shifted(h) - shifted(-h)) / (2.0 * h);
                assert!((d - fd).abs() < 1e-7, "{src} d/d{var:?}: {d} vs {fd}");
            }
        }
    }

    #[test]
    fn dependency_tracking() {
        let e = parse("x1 + 0 * y", &SCOPE).unwrap();
        assert!(e.depends_on(Var::Y(0)));
        assert!(!e.depends_on(Var::U(0)));
        assert_eq!(e.derivative(Var::U(0)), Expr::Num(0.0));
    }
}
