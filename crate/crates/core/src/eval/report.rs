use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::metrics::{index_qrels, ndcg_at_k, recall_at_k, GainMode, RecallMode};
use crate::domain::GradedJudgment;
use crate::io::{parse_qrels, parse_run, read_to_string, IoError, RunRow};
use crate::seed::sha256_hex;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("cutoffs must be at least 1")]
    InvalidCutoff,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub ks: Vec<usize>,
    pub gain: GainMode,
    pub recall: RecallMode,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            ks: vec![10],
            gain: GainMode::Exponential,
            recall: RecallMode::Standard,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryMetrics {
    pub query_id: String,
    pub ndcg: BTreeMap<usize, f64>,
    pub recall: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub run_tag: Option<String>,
    pub run_digest: Option<String>,
    pub qrels_digest: Option<String>,
    pub ks: Vec<usize>,
    pub gain_mode: GainMode,
    pub recall_mode: RecallMode,
    /// Sorted by query id.
    pub per_query: Vec<QueryMetrics>,
    pub macro_ndcg: BTreeMap<usize, f64>,
    pub macro_recall: BTreeMap<usize, f64>,
    /// Run queries without any judgments.
    pub skipped_queries: Vec<String>,
}

impl EvalReport {
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        if let Some(tag) = &self.run_tag {
            writeln!(out, "run: {tag}").unwrap();
        }
        writeln!(
            out,
            "gain: {}  recall: {}  queries: {}  skipped: {}",
            self.gain_mode,
            self.recall_mode,
            self.per_query.len(),
            self.skipped_queries.len()
        )
        .unwrap();
        let mut header = format!("{:<24}", "query");
        for k in &self.ks {
            write!(header, " {:>10} {:>10}", format!("NDCG@{k}"), format!("R@{k}")).unwrap();
        }
        writeln!(out, "{header}").unwrap();
        let row = |id: &str, ndcg: &BTreeMap<usize, f64>, recall: &BTreeMap<usize, f64>| {
            let mut line = format!("{id:<24}");
            for k in &self.ks {
                write!(line, " {:>10.4} {:>10.4}", ndcg[k], recall[k]).unwrap();
            }
            line
        };
        for q in &self.per_query {
            writeln!(out, "{}", row(&q.query_id, &q.ndcg, &q.recall)).unwrap();
        }
        if !self.per_query.is_empty() {
            writeln!(out, "{}", row("MEAN", &self.macro_ndcg, &self.macro_recall)).unwrap();
        }
        out
    }
}

/// Evaluates parsed run rows. Each query's ranking is read in rank-column
/// order; no tie-breaking is applied here.
pub fn evaluate_rows(
    run: &[RunRow],
    qrels: &[GradedJudgment],
    opts: &EvalOptions,
) -> Result<EvalReport, EvalError> {
    if opts.ks.is_empty() || opts.ks.contains(&0) {
        return Err(EvalError::InvalidCutoff);
    }
    let index = index_qrels(qrels);
    let mut by_query: BTreeMap<&str, Vec<&RunRow>> = BTreeMap::new();
    for row in run {
        by_query.entry(row.query_id.as_str()).or_default().push(row);
    }
    let mut per_query = Vec::new();
    let mut skipped = Vec::new();
    for (qid, mut rows) in by_query {
        let Some(q) = index.get(qid) else {
            log::warn!("query {qid} has no judgments; skipped");
            skipped.push(qid.to_string());
            continue;
        };
        rows.sort_by_key(|r| r.rank);
        let mut seen = HashSet::new();
        let ranking: Vec<&str> = rows
            .iter()
            .map(|r| r.doctor_id.as_str())
            .filter(|d| {
                let fresh = seen.insert(*d);
                if !fresh {
                    log::warn!("query {qid}: {d} ranked twice; later entry ignored");
                }
                fresh
            })
            .collect();
        per_query.push(QueryMetrics {
            query_id: qid.to_string(),
            ndcg: opts.ks.iter().map(|&k| (k, ndcg_at_k(&ranking, q, k, opts.gain))).collect(),
            recall: opts.ks.iter().map(|&k| (k, recall_at_k(&ranking, q, k, opts.recall))).collect(),
        });
    }
    let mean = |pick: &dyn Fn(&QueryMetrics) -> f64| {
        if per_query.is_empty() {
            0.0
        } else {
            per_query.iter().map(pick).sum::<f64>() / per_query.len() as f64
        }
    };
    let macro_ndcg = opts.ks.iter().map(|&k| (k, mean(&|q| q.ndcg[&k]))).collect();
    let macro_recall = opts.ks.iter().map(|&k| (k, mean(&|q| q.recall[&k]))).collect();
    let run_tag = run.first().map(|r| r.tag.clone());
    Ok(EvalReport {
        run_tag,
        run_digest: None,
        qrels_digest: None,
        ks: opts.ks.clone(),
        gain_mode: opts.gain,
        recall_mode: opts.recall,
        per_query,
        macro_ndcg,
        macro_recall,
        skipped_queries: skipped,
    })
}

/// Reads and evaluates a TREC run against TREC qrels; the report records
/// sha256 digests of both files.
pub fn evaluate_run(run_path: &Path, qrels_path: &Path, opts: &EvalOptions) -> Result<EvalReport, EvalError> {
    let run_text = read_to_string(run_path)?;
    let qrels_text = read_to_string(qrels_path)?;
    let run = parse_run(&run_text, run_path)?;
    let qrels = parse_qrels(&qrels_text, qrels_path)?;
    let mut report = evaluate_rows(&run, &qrels, opts)?;
    report.run_digest = Some(sha256_hex(&run_text));
    report.qrels_digest = Some(sha256_hex(&qrels_text));
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles::{brute_force_ndcg, OracleGain};
    use std::collections::HashMap;

    fn row(q: &str, d: &str, rank: usize) -> RunRow {
        RunRow {
            query_id: q.into(),
            doctor_id: d.into(),
            rank,
            score: -(rank as f64),
            tag: "t".into(),
        }
    }

    fn judgment(q: &str, d: &str, r: i32) -> GradedJudgment {
        GradedJudgment {
            query_id: q.into(),
            doctor_id: d.into(),
            relevance: r,
        }
    }

    #[test]
    fn single_query_macro_equals_query() {
        let qrels: Vec<_> = (0..6).map(|i| judgment("q1", &format!("d{i}"), 5 - i)).collect();
        // Reversed ideal.
        let run: Vec<_> = (0..6).map(|i| row("q1", &format!("d{}", 5 - i), i + 1)).collect();
        let report = evaluate_rows(&run, &qrels, &EvalOptions::default()).unwrap();
        assert_eq!(report.per_query.len(), 1);
        assert_eq!(report.macro_ndcg[&10], report.per_query[0].ndcg[&10]);
        let q: HashMap<String, i32> = qrels.iter().map(|j| (j.doctor_id.clone(), j.relevance)).collect();
        let ranking: Vec<String> = (0..6).map(|i| format!("d{}", 5 - i)).collect();
        let r: Vec<&str> = ranking.iter().map(String::as_str).collect();
        let want = brute_force_ndcg(&r, &q, 10, OracleGain::Exponential);
        assert!((report.macro_ndcg[&10] - want).abs() < 1e-12);
    }

    #[test]
    fn rank_column_decides_order_and_unjudged_queries_are_skipped() {
        let qrels = vec![judgment("q1", "a", 3), judgment("q1", "b", 0)];
        let run = vec![row("q1", "b", 2), row("q1", "a", 1), row("q9", "a", 1)];
        let report = evaluate_rows(&run, &qrels, &EvalOptions::default()).unwrap();
        assert_eq!(report.per_query[0].ndcg[&10], 1.0);
        assert_eq!(report.skipped_queries, vec!["q9".to_string()]);
        assert!(report.to_table().contains("MEAN"));
        assert!(matches!(
            evaluate_rows(&run, &qrels, &EvalOptions { ks: vec![0], ..Default::default() }),
            Err(EvalError::InvalidCutoff)
        ));
    }

    #[test]
    fn files_round_trip_with_digests() {
        let dir = tempfile::tempdir().unwrap();
        let run_path = dir.path().join("run.txt");
        let qrels_path = dir.path().join("qrels.txt");
        std::fs::write(&run_path, "q1 Q0 a 1 2.0 tag\nq1 Q0 b 2 1.0 tag\n").unwrap();
        std::fs::write(&qrels_path, "q1 0 a 1\nq1 0 b 2\n").unwrap();
        let opts = EvalOptions {
            ks: vec![1, 10],
            ..Default::default()
        };
        let report = evaluate_run(&run_path, &qrels_path, &opts).unwrap();
        assert_eq!(report.run_tag.as_deref(), Some("tag"));
        assert_eq!(report.run_digest.as_ref().unwrap().len(), 64);
        let json = serde_json::to_string(&report).unwrap();
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);
        assert_eq!(report, evaluate_run(&run_path, &qrels_path, &opts).unwrap());
        std::fs::write(&run_path, "q1 Q0 a one 2.0 tag\n").unwrap();
        match evaluate_run(&run_path, &qrels_path, &opts) {
            Err(EvalError::Io(IoError::Parse { line, .. })) => assert_eq!(line, 1),
            other => panic!("{other:?}"),
        }
    }
}
