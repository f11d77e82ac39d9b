//! Training log as JSON lines: `{"step", "E", "E_lm", "E_total", "dev_bleu4"}`.

use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};
use qgen_core::train::LogRecord;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogLine {
    pub step: u64,
    #[serde(rename = "E")]
    pub e: f64,
    #[serde(rename = "E_lm")]
    pub e_lm: f64,
    #[serde(rename = "E_total")]
    pub e_total: f64,
    pub dev_bleu4: Option<f64>,
}

impl From<&LogRecord> for LogLine {
    fn from(r: &LogRecord) -> Self {
        Self { step: r.step, e: r.e, e_lm: r.e_lm, e_total: r.e_total, dev_bleu4: r.dev_bleu4 }
    }
}

pub fn to_jsonl(records: &[LogRecord]) -> String {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, &LogLine::from(r)).expect("log line serializes");
        out.push(b'\n');
    }
    String::from_utf8(out).expect("json is utf-8")
}

pub fn write_log(path: &Path, records: &[LogRecord]) -> Result<()> {
    let mut f = fs::File::create(path).with_context(|| format!("{}: cannot create", path.display()))?;
    f.write_all(to_jsonl(records).as_bytes()).with_context(|| format!("{}: write failed", path.display()))
}

pub fn read_log(path: &Path) -> Result<Vec<LogLine>> {
    let text = fs::read_to_string(path).with_context(|| format!("{}: cannot read", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{}:{}: bad log line", path.display(), i + 1)))
        .collect()
}
