//! File formats: JSONL records, TREC qrels and TREC run files.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

use crate::domain::{GradedJudgment, RankedList};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

impl IoError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        IoError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub fn read_to_string(path: &Path) -> Result<String, IoError> {
    fs::read_to_string(path).map_err(|e| IoError::io(path, e))
}

/// Parses one JSON object per non-blank line.
pub fn parse_jsonl<T: DeserializeOwned>(text: &str, path: &Path) -> Result<Vec<T>, IoError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| IoError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, IoError> {
    parse_jsonl(&read_to_string(path)?, path)
}

pub fn to_jsonl<T: Serialize>(records: &[T]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("records serialize"));
        out.push('\n');
    }
    out
}

/// Writes through a temporary file in the same directory, then renames.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), IoError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| IoError::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| IoError::io(dir, e))?;
    tmp.write_all(contents).map_err(|e| IoError::io(path, e))?;
    tmp.persist(path).map_err(|e| IoError::io(path, e.error))?;
    Ok(())
}

/// `query_id iter doctor_id relevance`, whitespace separated.
pub fn parse_qrels(text: &str, path: &Path) -> Result<Vec<GradedJudgment>, IoError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split_whitespace().collect();
        let err = |message: String| IoError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        if cols.len() != 4 {
            return Err(err(format!("expected 4 columns, found {}", cols.len())));
        }
        let relevance = cols[3]
            .parse::<i32>()
            .map_err(|_| err(format!("relevance `{}` is not an integer", cols[3])))?;
        out.push(GradedJudgment {
            query_id: cols[0].to_string(),
            doctor_id: cols[2].to_string(),
            relevance,
        });
    }
    Ok(out)
}

pub fn read_qrels(path: &Path) -> Result<Vec<GradedJudgment>, IoError> {
    parse_qrels(&read_to_string(path)?, path)
}

pub fn format_qrels(judgments: &[GradedJudgment]) -> String {
    let mut out = String::new();
    for j in judgments {
        writeln!(out, "{} 0 {} {}", j.query_id, j.doctor_id, j.relevance).unwrap();
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRow {
    pub query_id: String,
    pub doctor_id: String,
    pub rank: usize,
    pub score: f64,
    pub tag: String,
}

/// `query_id Q0 doctor_id rank score tag`, one row per entry, ranks from 1
/// and scores with six decimals.
pub fn format_run(lists: &[RankedList], tag: &str) -> String {
    let mut out = String::new();
    for list in lists {
        for (pos, e) in list.entries().iter().enumerate() {
            writeln!(
                out,
                "{} Q0 {} {} {:.6} {}",
                list.query_id,
                e.doctor_id,
                pos + 1,
                e.score,
                tag
            )
            .unwrap();
        }
    }
    out
}

pub fn parse_run(text: &str, path: &Path) -> Result<Vec<RunRow>, IoError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split_whitespace().collect();
        let err = |message: String| IoError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        if cols.len() != 6 {
            return Err(err(format!("expected 6 columns, found {}", cols.len())));
        }
        let rank = cols[3]
            .parse::<usize>()
            .map_err(|_| err(format!("rank `{}` is not a positive integer", cols[3])))?;
        let score = cols[4]
            .parse::<f64>()
            .map_err(|_| err(format!("score `{}` is not a number", cols[4])))?;
        out.push(RunRow {
            query_id: cols[0].to_string(),
            doctor_id: cols[2].to_string(),
            rank,
            score,
            tag: cols[5].to_string(),
        });
    }
    Ok(out)
}

pub fn read_run(path: &Path) -> Result<Vec<RunRow>, IoError> {
    parse_run(&read_to_string(path)?, path)
}
