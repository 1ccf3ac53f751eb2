//! CSV and summary files. Numbers are written with 17 significant digits
//! so they read back bit-for-bit.

use std::fmt::Write as _;
use std::path::Path;

use dsmp::adjoint::MpReport;
use dsmp::tree::{AdaptedProcess, ScenarioTree};

use crate::Failure;

fn num(v: f64) -> String {
    format!("{v:.16e}")
}

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>, Failure> {
    csv::Writer::from_path(path).map_err(|e| Failure::Config(format!("cannot write {}: {e}", path.display())))
}

fn csv_err(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::Config(format!("cannot write {}: {e}", path.display()))
}

/// One row per entry: `t,node,component,value`, with matrix entries in
/// column-major order.
pub fn write_process(path: &Path, v: &AdaptedProcess, tree: &ScenarioTree) -> Result<(), Failure> {
    let mut w = writer(path)?;
    w.write_record(["t", "node", "component", "value"]).map_err(|e| csv_err(path, e))?;
    for t in 0..v.times() {
        for a in 0..tree.level_size(t) {
            for (j, x) in v.slice(t, a).iter().enumerate() {
                w.write_record([t.to_string(), a.to_string(), j.to_string(), num(*x)]).map_err(|e| csv_err(path, e))?;
            }
        }
    }
    w.flush().map_err(|e| csv_err(path, e))
}

/// Table cell: indices print as integers, values with full precision.
#[derive(Debug, Clone, Copy)]
pub enum Cell {
    Int(usize),
    Num(f64),
}

impl Cell {
    fn render(self) -> String {
        match self {
            Cell::Int(i) => i.to_string(),
            Cell::Num(v) => num(v),
        }
    }
}

pub fn write_rows(path: &Path, header: &[&str], rows: &[Vec<Cell>]) -> Result<(), Failure> {
    let mut w = writer(path)?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record(r.iter().map(|c| c.render())).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| csv_err(path, e))
}

pub fn write_mp(path: &Path, report: &MpReport) -> Result<(), Failure> {
    let mut w = writer(path)?;
    w.write_record(["t", "node", "violation", "active"]).map_err(|e| csv_err(path, e))?;
    for r in &report.rows {
        w.write_record([r.t.to_string(), r.node.to_string(), num(r.violation), r.active_string()])
            .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| csv_err(path, e))
}

/// Reads a process written by [`write_process`]; entries not listed stay
/// zero.
pub fn read_process(path: &Path, tree: &ScenarioTree, rows: usize, times: usize) -> Result<AdaptedProcess, Failure> {
    let bad = |msg: String| Failure::Config(format!("config field `control`: {}: {msg}", path.display()));
    let mut reader = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
    let mut v = AdaptedProcess::zeros(tree, rows, 1, times);
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let line = i + 2;
        if rec.len() != 4 {
            return Err(bad(format!("line {line}: expected 4 columns")));
        }
        let idx = |k: usize| rec[k].trim().parse::<usize>().map_err(|e| bad(format!("line {line}: {e}")));
        let (t, a, j) = (idx(0)?, idx(1)?, idx(2)?);
        let value: f64 = rec[3].trim().parse().map_err(|e| bad(format!("line {line}: {e}")))?;
        if t >= times || a >= tree.level_size(t) || j >= rows {
            return Err(bad(format!("line {line}: entry (t={t}, node={a}, component={j}) outside the tree")));
        }
        v.slice_mut(t, a)[j] = value;
    }
    Ok(v)
}

/// `key: value` lines, in insertion order.
#[derive(Debug, Default)]
pub struct Summary {
    lines: Vec<(String, String)>,
}

impl Summary {
    pub fn text(&mut self, key: &str, value: &str) {
        self.lines.push((key.to_string(), value.to_string()));
    }

    pub fn num(&mut self, key: &str, value: f64) {
        self.text(key, &num(value));
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.lines {
            let _ = writeln!(s, "{k}: {v}");
        }
        s
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.render())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use dsmp::tree::IncrementDistribution;

    #[test]
    fn processes_round_trip_exactly() {
        let tree = ScenarioTree::product(3, IncrementDistribution::trinomial(1)).unwrap();
        let v = AdaptedProcess::from_fn(&tree, 2, 1, 4, |t, a| vec![(t as f64 + 0.1).sqrt() / 3.0, -1e-300 * a as f64]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.csv");
        write_process(&path, &v, &tree).unwrap();
        assert_eq!(read_process(&path, &tree, 2, 4).unwrap(), v);
    }

    #[test]
    fn out_of_range_rows_are_rejected() {
        let tree = ScenarioTree::product(1, IncrementDistribution::rademacher(1)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("u.csv");
        std::fs::write(&path, "t,node,component,value\n1,2,0,1.0\n").unwrap();
        assert!(matches!(read_process(&path, &tree, 1, 2), Err(Failure::Config(m)) if m.contains("outside")));
    }
}
