//! JSON-lines triples: one object per line with `sentence`, `pos`, `ner`,
//! `answer_start`, `answer_end`, and `question`.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use qgen_core::corpus::RawTriple;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("{path}: {err}")]
    Io { path: PathBuf, err: std::io::Error },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Line {
    sentence: Vec<String>,
    pos: Vec<String>,
    ner: Vec<String>,
    answer_start: usize,
    answer_end: usize,
    question: Vec<String>,
}

pub fn parse_dataset(text: &str, path: &Path) -> Result<Vec<RawTriple>, DatasetError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| DatasetError::Parse { path: path.to_path_buf(), line: i + 1, message };
        let line: Line = serde_json::from_str(raw).map_err(|e| parse_err(e.to_string()))?;
        let triple = RawTriple {
            sentence: line.sentence,
            pos: line.pos,
            ner: line.ner,
            answer_start: line.answer_start,
            answer_end: line.answer_end,
            question: line.question,
        };
        triple.validate().map_err(|e| parse_err(e.to_string()))?;
        out.push(triple);
    }
    Ok(out)
}

pub fn load_dataset(path: &Path) -> Result<Vec<RawTriple>, DatasetError> {
    let text = fs::read_to_string(path).map_err(|err| DatasetError::Io { path: path.to_path_buf(), err })?;
    parse_dataset(&text, path)
}

pub fn write_dataset(path: &Path, triples: &[RawTriple]) -> std::io::Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for t in triples {
        let line = Line {
            sentence: t.sentence.clone(),
            pos: t.pos.clone(),
            ner: t.ner.clone(),
            answer_start: t.answer_start,
            answer_end: t.answer_end,
            question: t.question.clone(),
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

/// Whitespace-tokenized sequences, one per line (hypothesis and reference files).
pub fn load_token_lines(path: &Path) -> Result<Vec<Vec<String>>, DatasetError> {
    let text = fs::read_to_string(path).map_err(|err| DatasetError::Io { path: path.to_path_buf(), err })?;
    Ok(text.lines().map(|l| l.split_whitespace().map(String::from).collect()).collect())
}
