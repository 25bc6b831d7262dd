//! Per-(method, task) metric rows and their CSV / markdown renderings.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "method,task,bleu,ppl,acc";
pub const EMPTY_CELL: &str = "—";
const PARALLEL_SUFFIX: &str = "-par";
const NONPARALLEL_SUFFIX: &str = "-np";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskGroup {
    Parallel,
    NonParallel,
}

/// Task label carrying its group, e.g. `s3/t9-np`.
pub fn task_label(prefix: &str, task_id: u32, parallel: bool) -> String {
    let suffix = if parallel { PARALLEL_SUFFIX } else { NONPARALLEL_SUFFIX };
    if prefix.is_empty() {
        format!("t{task_id}{suffix}")
    } else {
        format!("{prefix}/t{task_id}{suffix}")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub task: String,
    pub bleu: Option<f64>,
    pub ppl: Option<f64>,
    pub acc: Option<f64>,
}

impl ReportRow {
    pub fn group(&self) -> Option<TaskGroup> {
        if self.task.ends_with(PARALLEL_SUFFIX) {
            Some(TaskGroup::Parallel)
        } else if self.task.ends_with(NONPARALLEL_SUFFIX) {
            Some(TaskGroup::NonParallel)
        } else {
            None
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Aggregate {
    pub bleu: Option<f64>,
    pub ppl: Option<f64>,
    pub acc: Option<f64>,
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Median of the present values; the mean of the middle two for even counts.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
    /// Free-form lines appended to the markdown rendering.
    pub notes: Vec<String>,
}

const METHOD_ORDER: [&str; 3] = ["baseline", "maml", "taml"];

fn method_rank(m: &str) -> usize {
    METHOD_ORDER.iter().position(|&x| x == m).unwrap_or(METHOD_ORDER.len())
}

impl EvalReport {
    pub fn new(rows: Vec<ReportRow>) -> Self {
        Self { rows, notes: Vec::new() }
    }

    /// Methods in presentation order.
    pub fn methods(&self) -> Vec<String> {
        let mut m: Vec<String> = Vec::new();
        for r in &self.rows {
            if !m.contains(&r.method) {
                m.push(r.method.clone());
            }
        }
        m.sort_by(|a, b| method_rank(a).cmp(&method_rank(b)).then_with(|| a.cmp(b)));
        m
    }

    pub fn aggregate(&self, method: &str, group: Option<TaskGroup>) -> Aggregate {
        let rows = || {
            self.rows
                .iter()
                .filter(move |r| r.method == method && (group.is_none() || r.group() == group))
        };
        Aggregate {
            bleu: mean(rows().map(|r| r.bleu)),
            ppl: mean(rows().map(|r| r.ppl)),
            acc: mean(rows().map(|r| r.acc)),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let cell = |v: Option<f64>| v.map_or_else(|| EMPTY_CELL.to_string(), |x| format!("{x}"));
            let _ = writeln!(out, "{},{},{},{},{}", r.method, r.task, cell(r.bleu), cell(r.ppl), cell(r.acc));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(CSV_HEADER) {
            return Err(Error::Config(format!("report CSV must start with `{CSV_HEADER}`")));
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(Error::Config(format!("report line {}: expected 5 fields", i + 2)));
            }
            let num = |s: &str| -> Result<Option<f64>> {
                if s == EMPTY_CELL {
                    return Ok(None);
                }
                s.parse()
                    .map(Some)
                    .map_err(|_| Error::Config(format!("report line {}: bad number `{s}`", i + 2)))
            };
            rows.push(ReportRow {
                method: f[0].into(),
                task: f[1].into(),
                bleu: num(f[2])?,
                ppl: num(f[3])?,
                acc: num(f[4])?,
            });
        }
        Ok(Self::new(rows))
    }

    /// Summary table by task group, then one row per (method, task).
    pub fn to_markdown(&self) -> String {
        let cell = |v: Option<f64>| v.map_or_else(|| EMPTY_CELL.to_string(), |x| format!("{x:.2}"));
        let mut out = String::new();
        let groups = [
            ("parallel", Some(TaskGroup::Parallel)),
            ("non-parallel", Some(TaskGroup::NonParallel)),
            ("all", None),
        ];
        out.push_str("| method |");
        for (name, _) in &groups {
            let _ = write!(out, " {name} BLEU↑ | {name} PPL↓ | {name} ACC↑ |");
        }
        out.push_str("\n|---|");
        for _ in &groups {
            out.push_str("---:|---:|---:|");
        }
        out.push('\n');
        for m in self.methods() {
            let _ = write!(out, "| {m} |");
            for (_, g) in &groups {
                let a = self.aggregate(&m, *g);
                let _ = write!(out, " {} | {} | {} |", cell(a.bleu), cell(a.ppl), cell(a.acc));
            }
            out.push('\n');
        }
        out.push_str("\n| method | task | BLEU↑ | PPL↓ | ACC↑ |\n|---|---|---:|---:|---:|\n");
        let mut rows: Vec<&ReportRow> = self.rows.iter().collect();
        rows.sort_by(|a, b| {
            method_rank(&a.method)
                .cmp(&method_rank(&b.method))
                .then_with(|| a.method.cmp(&b.method))
        });
        for r in rows {
            let _ = writeln!(
                out,
                "| {} | {} | {} | {} | {} |",
                r.method,
                r.task,
                cell(r.bleu),
                cell(r.ppl),
                cell(r.acc)
            );
        }
        if !self.notes.is_empty() {
            out.push('\n');
            for n in &self.notes {
                out.push_str(n);
                out.push('\n');
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn sample() -> EvalReport {
        EvalReport::new(vec![
            ReportRow {
                method: "taml".into(),
                task: task_label("s1", 8, true),
                bleu: Some(12.345678901234567),
                ppl: Some(3.0),
                acc: None,
            },
            ReportRow {
                method: "baseline".into(),
                task: task_label("s1", 9, false),
                bleu: Some(0.1),
                ppl: None,
                acc: Some(0.75),
            },
        ])
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let r = sample();
        let csv = r.to_csv();
        assert!(csv.starts_with("method,task,bleu,ppl,acc\n"));
        assert_eq!(EvalReport::from_csv(&csv).unwrap(), r);
    }

    #[test]
    fn markdown_marks_empty_cells_and_orientation() {
        let md = sample().to_markdown();
        assert!(md.contains("BLEU↑") && md.contains("PPL↓") && md.contains("ACC↑"));
        assert!(md.contains(EMPTY_CELL));
        let baseline = md.find("| baseline |").unwrap();
        let taml = md.find("| taml |").unwrap();
        assert!(baseline < taml);
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }
}
