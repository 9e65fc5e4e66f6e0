//! Line-delimited run records.
//!
//! A run log is a sequence of JSON objects, one per line, each carrying a
//! `kind` field:
//!
//! ```text
//! {"kind":"config","run":{...resolved configuration...}}
//! {"kind":"task","task_index":0,"labels":[0],"train_examples":200,"accuracy":0.25,
//!  "per_class":[1.0,0.0,0.0,0.0],"nonconvergence_rate":0.0,"skipped":0,"elapsed_s":null}
//! ...
//! {"kind":"summary","seed":7,"tasks":4,"final_accuracy":0.97,"per_class":[...],
//!  "nonconvergence_rate":0.0,"stream_fingerprint":"<hex>","elapsed_s":null}
//! ```
//!
//! `per_class` entries are `null` for classes absent from the test set.
//! `elapsed_s` is `null` unless timings were requested, so that logs of equal
//! seeds are byte-identical.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::continual::RunConfig;
use crate::error::{DeeError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskRecord {
    pub task_index: usize,
    pub labels: Vec<usize>,
    pub train_examples: usize,
    pub accuracy: f64,
    pub per_class: Vec<Option<f64>>,
    pub nonconvergence_rate: f64,
    /// Training examples dropped because no selected expert carried voting weight.
    pub skipped: usize,
    pub elapsed_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SummaryRecord {
    pub seed: u64,
    pub tasks: usize,
    pub final_accuracy: f64,
    pub per_class: Vec<Option<f64>>,
    pub nonconvergence_rate: f64,
    pub stream_fingerprint: String,
    pub elapsed_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LogRecord {
    Config { run: RunConfig },
    Task(TaskRecord),
    Summary(SummaryRecord),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub config: RunConfig,
    pub tasks: Vec<TaskRecord>,
    pub summary: SummaryRecord,
}

impl RunLog {
    pub fn records(&self) -> Vec<LogRecord> {
        let mut out = vec![LogRecord::Config {
            run: self.config.clone(),
        }];
        out.extend(self.tasks.iter().cloned().map(LogRecord::Task));
        out.push(LogRecord::Summary(self.summary.clone()));
        out
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for r in self.records() {
            writeln!(s, "{}", serde_json::to_string(&r).expect("records serialize")).expect("string write");
        }
        s
    }

    /// Accuracy after each task, in order.
    pub fn trajectory(&self) -> Vec<f64> {
        self.tasks.iter().map(|t| t.accuracy).collect()
    }
}

fn check_unit(at: u64, line: usize, what: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(DeeError::format(at, format!("line {line}: {what} = {v} outside [0, 1]")));
    }
    Ok(())
}

fn check_per_class(at: u64, line: usize, per_class: &[Option<f64>]) -> Result<()> {
    for v in per_class.iter().flatten() {
        check_unit(at, line, "per-class accuracy", *v)?;
    }
    Ok(())
}

/// Strict parser: exactly one config line first, consecutive task indices, one summary line last.
/// Format errors carry the byte offset of the offending line and name its 1-based number.
pub fn parse_run_log(text: &str) -> Result<RunLog> {
    let mut config = None;
    let mut tasks: Vec<TaskRecord> = Vec::new();
    let mut summary = None;
    let mut offset = 0usize;
    for (i, chunk) in text.split_inclusive('\n').enumerate() {
        let line = i + 1;
        let at = offset as u64;
        offset += chunk.len();
        let raw = chunk.trim_end_matches(['\n', '\r']);
        if summary.is_some() {
            return Err(DeeError::format(at, format!("line {line}: content after summary")));
        }
        let rec: LogRecord = serde_json::from_str(raw)
            .map_err(|e| DeeError::format(at, format!("line {line}: {e}")))?;
        match rec {
            LogRecord::Config { run } => {
                if line != 1 {
                    return Err(DeeError::format(at, format!("line {line}: config record must come first")));
                }
                config = Some(run);
            }
            LogRecord::Task(t) => {
                if config.is_none() {
                    return Err(DeeError::format(at, format!("line {line}: task before config")));
                }
                if t.task_index != tasks.len() {
                    return Err(DeeError::format(
                        at,
                        format!("line {line}: task index {} out of sequence", t.task_index),
                    ));
                }
                check_unit(at, line, "accuracy", t.accuracy)?;
                check_unit(at, line, "nonconvergence rate", t.nonconvergence_rate)?;
                check_per_class(at, line, &t.per_class)?;
                tasks.push(t);
            }
            LogRecord::Summary(s) => {
                if config.is_none() {
                    return Err(DeeError::format(at, format!("line {line}: summary before config")));
                }
                if s.tasks != tasks.len() {
                    return Err(DeeError::format(
                        at,
                        format!("line {line}: summary counts {} tasks, log has {}", s.tasks, tasks.len()),
                    ));
                }
                check_unit(at, line, "final accuracy", s.final_accuracy)?;
                check_unit(at, line, "nonconvergence rate", s.nonconvergence_rate)?;
                check_per_class(at, line, &s.per_class)?;
                summary = Some(s);
            }
        }
    }
    match (config, summary) {
        (Some(config), Some(summary)) => Ok(RunLog { config, tasks, summary }),
        _ => Err(DeeError::format(text.len() as u64, "log is missing its config or summary record")),
    }
}
