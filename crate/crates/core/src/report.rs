//! Per-system evaluation reports and side-by-side comparison tables.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{Direction, EvalOptions, Metric, TaskReport};
use crate::model::TaskKind;

pub const EVAL_REPORT_FORMAT: &str = "medbench-eval/1";

/// Output of `eval`: the metric bundle of every evaluated task for one system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format: String,
    pub system: String,
    pub config_digest: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub options: EvalOptions,
    /// SHA-256 of each input file, keyed by role (`truth`, `pred`).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub inputs: BTreeMap<String, String>,
    pub tasks: Vec<TaskReport>,
}

impl EvalReport {
    pub fn new(system: impl Into<String>, options: EvalOptions, tasks: Vec<TaskReport>) -> Self {
        let mut r = EvalReport {
            format: EVAL_REPORT_FORMAT.to_string(),
            system: system.into(),
            config_digest: String::new(),
            seed: None,
            options,
            inputs: BTreeMap::new(),
            tasks,
        };
        r.config_digest = crate::digest::config_digest(&(&r.system, r.seed, &r.options));
        r
    }

    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        self.seed = seed;
        self.config_digest =
            crate::digest::config_digest(&(&self.system, self.seed, &self.options));
        self
    }

    pub fn task(&self, task: TaskKind) -> Option<&TaskReport> {
        self.tasks.iter().find(|t| t.task == Some(task))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Markdown,
    Csv,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            _ => Err(format!("unknown report format '{s}' (markdown|csv|json)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub task: TaskKind,
    pub title: String,
    pub n: Vec<usize>,
    pub metric: Metric,
    pub name: String,
    pub direction: Direction,
    pub values: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub systems: Vec<String>,
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonReport {
    /// Rows follow the fixed task order and each task's metric list.
    pub fn build(reports: &[EvalReport]) -> Result<Self> {
        let first = reports
            .first()
            .ok_or(Error::EmptyInput("comparison over zero systems"))?;
        let tasks_of = |r: &EvalReport| -> BTreeSet<TaskKind> {
            r.tasks.iter().filter_map(|t| t.task).collect()
        };
        let expected = tasks_of(first);
        for r in &reports[1..] {
            let got = tasks_of(r);
            if got != expected {
                let missing: Vec<String> = expected
                    .symmetric_difference(&got)
                    .map(|t| {
                        let owner = if got.contains(t) {
                            &first.system
                        } else {
                            &r.system
                        };
                        format!("'{owner}' lacks {t}")
                    })
                    .collect();
                return Err(Error::TaskCoverage(missing.join(", ")));
            }
        }

        let mut rows = Vec::new();
        for task in TaskKind::ALL.into_iter().filter(|t| expected.contains(t)) {
            let per_sys: Vec<&TaskReport> = reports
                .iter()
                .map(|r| r.task(task).expect("coverage checked"))
                .collect();
            for &metric in Metric::for_task(task) {
                rows.push(ComparisonRow {
                    task,
                    title: task.title().to_string(),
                    n: per_sys.iter().map(|t| t.n).collect(),
                    metric,
                    name: metric.name().to_string(),
                    direction: metric.direction(),
                    values: per_sys.iter().map(|t| t.get(metric)).collect(),
                });
            }
        }
        Ok(ComparisonReport {
            systems: reports.iter().map(|r| r.system.clone()).collect(),
            rows,
        })
    }
}

fn fmt_value(metric: Metric, v: Option<f64>) -> String {
    match v {
        None => "n/a".to_string(),
        Some(x) if metric.is_integer() => format!("{}", x.round() as i64),
        Some(x) => format!("{x:.2}"),
    }
}

fn fmt_n(n: &[usize]) -> String {
    let first = n.first().copied().unwrap_or(0);
    if n.iter().all(|&x| x == first) {
        first.to_string()
    } else {
        n.iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join("/")
    }
}

/// Name of the system with the best value, `tie`, or empty when undecidable.
fn best(row: &ComparisonRow, systems: &[String]) -> String {
    let known: Vec<(usize, f64)> = row
        .values
        .iter()
        .enumerate()
        .filter_map(|(i, v)| v.map(|x| (i, x)))
        .collect();
    if known.len() < 2 {
        return String::new();
    }
    let pick = |a: f64, b: f64| match row.direction {
        Direction::LowerIsBetter => a < b,
        Direction::HigherIsBetter => a > b,
    };
    let target = known
        .iter()
        .map(|k| k.1)
        .reduce(|a, b| if pick(b, a) { b } else { a })
        .expect("non-empty");
    let winners: Vec<usize> = known
        .iter()
        .filter(|(_, x)| fmt_value(row.metric, Some(*x)) == fmt_value(row.metric, Some(target)))
        .map(|k| k.0)
        .collect();
    if winners.len() > 1 {
        "tie".to_string()
    } else {
        systems[winners[0]].clone()
    }
}

fn caption() -> String {
    let all = [
        Metric::CountMae,
        Metric::CountMse,
        Metric::PointMae,
        Metric::PointRmse,
        Metric::MatchingAccuracy,
        Metric::ZeroCasePoints,
        Metric::Map,
        Metric::Map50,
        Metric::Map75,
        Metric::AvgIou,
    ];
    let names = |d: Direction| -> String {
        all.iter()
            .filter(|m| m.direction() == d)
            .map(|m| m.name())
            .collect::<Vec<_>>()
            .join(", ")
    };
    format!(
        "Lower is better: {}. Higher is better: {}.",
        names(Direction::LowerIsBetter),
        names(Direction::HigherIsBetter)
    )
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn render_comparison(report: &ComparisonReport, format: ReportFormat) -> Result<String> {
    let mut out = String::new();
    match format {
        ReportFormat::Markdown => {
            let compare = report.systems.len() > 1;
            let _ = write!(out, "| Task | Metric |");
            for s in &report.systems {
                let _ = write!(out, " {s} |");
            }
            if compare {
                out.push_str(" Best |");
            }
            out.push('\n');
            out.push_str("|---|---|");
            for _ in &report.systems {
                out.push_str("---:|");
            }
            if compare {
                out.push_str("---|");
            }
            out.push('\n');
            let mut last_task = None;
            for row in &report.rows {
                let head = if last_task != Some(row.task) {
                    last_task = Some(row.task);
                    format!("**{}** (n={})", row.title, fmt_n(&row.n))
                } else {
                    String::new()
                };
                let _ = write!(out, "| {head} | {} |", row.name);
                for v in &row.values {
                    let _ = write!(out, " {} |", fmt_value(row.metric, *v));
                }
                if compare {
                    let _ = write!(out, " {} |", best(row, &report.systems));
                }
                out.push('\n');
            }
            out.push('\n');
            out.push_str(&caption());
            out.push('\n');
        }
        ReportFormat::Csv => {
            out.push_str("task,n,metric,direction");
            for s in &report.systems {
                let _ = write!(out, ",{}", csv_field(s));
            }
            out.push('\n');
            for row in &report.rows {
                let dir = match row.direction {
                    Direction::LowerIsBetter => "lower",
                    Direction::HigherIsBetter => "higher",
                };
                let _ = write!(
                    out,
                    "{},{},{},{}",
                    row.task,
                    fmt_n(&row.n),
                    csv_field(&row.name),
                    dir
                );
                for v in &row.values {
                    match v {
                        Some(x) => {
                            let _ = write!(out, ",{x}");
                        }
                        None => out.push(','),
                    }
                }
                out.push('\n');
            }
        }
        ReportFormat::Json => {
            out = serde_json::to_string_pretty(report)?;
            out.push('\n');
        }
    }
    Ok(out)
}

pub fn render_report(reports: &[EvalReport], format: ReportFormat) -> Result<String> {
    render_comparison(&ComparisonReport::build(reports)?, format)
}
