//! Built-in problems, shipped as problem files.

use crate::config::{ExprProblem, ProblemFile};
use crate::error::{Error, Result};

const ENTRIES: &[(&str, &str)] = &[
    ("lq-forward", include_str!("../catalog/lq-forward.toml")),
    ("linear-monotone", include_str!("../catalog/linear-monotone.toml")),
    ("tanh-smooth", include_str!("../catalog/tanh-smooth.toml")),
    ("linear-beta", include_str!("../catalog/linear-beta.toml")),
];

pub fn names() -> Vec<&'static str> {
    ENTRIES.iter().map(|(n, _)| *n).collect()
}

/// Source text of a catalog entry.
pub fn source(name: &str) -> Result<&'static str> {
    ENTRIES
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, s)| *s)
        .ok_or_else(|| Error::config("catalog", format!("unknown problem `{name}`; available: {}", names().join(", "))))
}

pub fn file(name: &str) -> Result<ProblemFile> {
    ProblemFile::from_toml(source(name)?)
}

pub fn load(name: &str) -> Result<(ProblemFile, ExprProblem)> {
    let src = source(name)?;
    let file = ProblemFile::from_toml(src)?;
    let problem = ExprProblem::new(&file, src)?;
    Ok((file, problem))
}
