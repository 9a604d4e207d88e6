//! Convergence table of a study: primal costs, best dual bound and the
//! scaling-limit value per horizon.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{CliError, Result};
use crate::results::{read_rows, ResultRow, Status};

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceRow {
    pub n: usize,
    pub primal: f64,
    /// Largest certified dual bound at this horizon, if any.
    pub lower_bound: Option<f64>,
    pub limit: f64,
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceTable {
    pub study_id: String,
    /// `limit_hjb` or `limit_mc`.
    pub limit_source: String,
    pub rows: Vec<ConvergenceRow>,
}

/// Builds the table of `study_id` from result rows; later rows supersede
/// earlier copies of the same instance.
pub fn convergence_table(rows: &[ResultRow], study_id: &str) -> Result<ConvergenceTable> {
    let study: Vec<&ResultRow> = rows.iter().filter(|r| r.study_id == study_id).collect();
    let mut primal = BTreeMap::new();
    let mut lower: BTreeMap<usize, f64> = BTreeMap::new();
    let (mut hjb, mut mc) = (None, None);
    for r in &study {
        match (r.quantity.as_str(), r.n) {
            ("pi_n", Some(n)) => {
                primal.insert(n, r.value);
            }
            ("kusuoka_bound" | "kusuoka_sharp", Some(n)) if r.status == Status::Ok => {
                let best = lower.entry(n).or_insert(f64::NEG_INFINITY);
                *best = best.max(r.value);
            }
            ("limit_hjb", _) => hjb = Some(r.value),
            ("limit_mc", _) => mc = Some(r.value),
            _ => {}
        }
    }
    if primal.is_empty() {
        return Err(CliError::MissingRows(format!("no primal rows for study {study_id}")));
    }
    let (limit, limit_source) = match (hjb, mc) {
        (Some(v), _) => (v, "limit_hjb"),
        (None, Some(v)) => (v, "limit_mc"),
        (None, None) => {
            return Err(CliError::MissingRows(format!("no limit value for study {study_id}")));
        }
    };
    Ok(ConvergenceTable {
        study_id: study_id.to_string(),
        limit_source: limit_source.to_string(),
        rows: primal
            .into_iter()
            .map(|(n, p)| ConvergenceRow {
                n,
                primal: p,
                lower_bound: lower.get(&n).copied(),
                limit,
                gap: (p - limit).abs(),
            })
            .collect(),
    })
}

/// Reads the results store at `path` and builds the table of `study_id`.
pub fn load_convergence_table(path: &Path, study_id: &str) -> Result<ConvergenceTable> {
    convergence_table(&read_rows(path)?, study_id)
}

impl ConvergenceTable {
    pub fn render(&self) -> String {
        let mut out = format!("study {} (limit from {})\n", self.study_id, self.limit_source);
        let _ = writeln!(out, "{:>6}  {:>12}  {:>12}  {:>12}  {:>12}", "N", "pi_N", "lower", "limit", "|gap|");
        for r in &self.rows {
            let lower = r.lower_bound.map_or("-".to_string(), |v| format!("{v:.6}"));
            let _ = writeln!(
                out,
                "{:>6}  {:>12.6}  {:>12}  {:>12.6}  {:>12.6}",
                r.n, r.primal, lower, r.limit, r.gap
            );
        }
        out
    }

    /// Long-format plot data: one `series,n,value` line per point.
    pub fn plot_csv(&self) -> String {
        let mut out = String::from("series,n,value\n");
        for r in &self.rows {
            let _ = writeln!(out, "pi_n,{},{}", r.n, r.primal);
            if let Some(v) = r.lower_bound {
                let _ = writeln!(out, "lower_bound,{},{v}", r.n);
            }
            let _ = writeln!(out, "limit,{},{}", r.n, r.limit);
            let _ = writeln!(out, "gap,{},{}", r.n, r.gap);
        }
        out
    }

    /// Writes `<dir>/study_<id>_table.txt` and `<dir>/study_<id>_plot.csv`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(format!("study_{}_table.txt", self.study_id)), self.render())?;
        std::fs::write(dir.join(format!("study_{}_plot.csv", self.study_id)), self.plot_csv())?;
        Ok(())
    }
}
