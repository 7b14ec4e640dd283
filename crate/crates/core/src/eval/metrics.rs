use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::domain::GradedJudgment;

/// Judged relevance of each document for one query.
pub type QueryQrels = HashMap<String, i32>;
/// Qrels for every query, keyed by query id.
pub type QrelsIndex = BTreeMap<String, QueryQrels>;

/// Groups judgments by query. A repeated (query, doctor) judgment keeps the
/// highest grade.
pub fn index_qrels(judgments: &[GradedJudgment]) -> QrelsIndex {
    let mut out = QrelsIndex::new();
    for j in judgments {
        let grade = out
            .entry(j.query_id.clone())
            .or_default()
            .entry(j.doctor_id.clone())
            .or_insert(j.relevance);
        *grade = (*grade).max(j.relevance);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GainMode {
    /// `2^r - 1`
    #[default]
    Exponential,
    /// `r`
    Linear,
}

impl GainMode {
    fn gain(self, rel: i32) -> f64 {
        let r = rel.max(0);
        match self {
            GainMode::Exponential => (2f64).powi(r) - 1.0,
            GainMode::Linear => r as f64,
        }
    }
}

impl fmt::Display for GainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GainMode::Exponential => "exponential",
            GainMode::Linear => "linear",
        })
    }
}

impl FromStr for GainMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "exponential" | "exp" => Ok(GainMode::Exponential),
            "linear" => Ok(GainMode::Linear),
            other => Err(format!("unknown gain mode `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecallMode {
    /// Denominator is the number of relevant documents.
    #[default]
    Standard,
    /// Denominator is `min(k, relevant)`.
    Capped,
}

impl fmt::Display for RecallMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RecallMode::Standard => "standard",
            RecallMode::Capped => "capped",
        })
    }
}

impl FromStr for RecallMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "standard" => Ok(RecallMode::Standard),
            "capped" => Ok(RecallMode::Capped),
            other => Err(format!("unknown recall mode `{other}`")),
        }
    }
}

fn dcg(grades: impl Iterator<Item = i32>, gain: GainMode) -> f64 {
    grades
        .enumerate()
        .map(|(i, r)| gain.gain(r) / (i as f64 + 2.0).log2())
        .sum()
}

/// NDCG@k of `ranking` (best first). Unjudged documents count as grade 0;
/// the ideal ordering is built from every judgment of the query.
pub fn ndcg_at_k(ranking: &[&str], qrels: &QueryQrels, k: usize, gain: GainMode) -> f64 {
    if k == 0 {
        return 0.0;
    }
    let mut unjudged = 0;
    let actual = dcg(
        ranking.iter().take(k).map(|d| {
            qrels.get(*d).copied().unwrap_or_else(|| {
                unjudged += 1;
                0
            })
        }),
        gain,
    );
    if unjudged > 0 {
        log::debug!("{unjudged} unjudged documents in top {k}, treated as grade 0");
    }
    let mut ideal: Vec<i32> = qrels.values().copied().collect();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let best = dcg(ideal.into_iter().take(k), gain);
    if best <= 0.0 {
        0.0
    } else {
        actual / best
    }
}

/// Share of relevant (grade >= 1) documents found in the top `k`.
pub fn recall_at_k(ranking: &[&str], qrels: &QueryQrels, k: usize, mode: RecallMode) -> f64 {
    let relevant = qrels.values().filter(|r| **r >= 1).count();
    if relevant == 0 || k == 0 {
        log::debug!("recall@{k} undefined without relevant documents, reporting 0");
        return 0.0;
    }
    let found = ranking
        .iter()
        .take(k)
        .filter(|d| qrels.get(**d).is_some_and(|r| *r >= 1))
        .count();
    let denom = match mode {
        RecallMode::Standard => relevant,
        RecallMode::Capped => relevant.min(k),
    };
    found as f64 / denom as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles::{brute_force_ndcg, permutations, OracleGain};
    use proptest::prelude::*;

    fn qrels(pairs: &[(&str, i32)]) -> QueryQrels {
        pairs.iter().map(|(d, r)| (d.to_string(), *r)).collect()
    }

    #[test]
    fn two_document_example() {
        let q = qrels(&[("d1", 0), ("d2", 1)]);
        let v = ndcg_at_k(&["d1", "d2"], &q, 2, GainMode::Exponential);
        assert!((v - 1.0 / 3f64.log2()).abs() < 1e-9);
        assert!((v - 0.63093).abs() < 1e-5);
        assert_eq!(ndcg_at_k(&["d2", "d1"], &q, 2, GainMode::Exponential), 1.0);
    }

    #[test]
    fn zero_ideal_and_unknown_docs() {
        let q = qrels(&[("d1", 0), ("d2", 0)]);
        assert_eq!(ndcg_at_k(&["d1", "d2"], &q, 10, GainMode::Exponential), 0.0);
        let q = qrels(&[("d1", 2)]);
        let v = ndcg_at_k(&["x", "d1"], &q, 10, GainMode::Linear);
        assert!((v - 1.0 / 3f64.log2()).abs() < 1e-12);
    }

    #[test]
    fn every_permutation_matches_oracle() {
        let q = qrels(&[("a", 5), ("b", 3), ("c", 3), ("d", 1), ("e", 0), ("f", 2)]);
        let ids = ["a", "b", "c", "d", "e", "f"];
        for perm in permutations(&ids) {
            for (gain, og) in [(GainMode::Exponential, OracleGain::Exponential), (GainMode::Linear, OracleGain::Linear)] {
                for k in [1, 3, 6, 10] {
                    let got = ndcg_at_k(&perm, &q, k, gain);
                    let want = brute_force_ndcg(&perm, &q, k, og);
                    assert!((got - want).abs() < 1e-12, "{perm:?} k={k}");
                }
            }
        }
    }

    #[test]
    fn recall_modes() {
        let q = qrels(&[("a", 1), ("b", 2), ("c", 0), ("d", 3)]);
        assert_eq!(recall_at_k(&["a", "b", "d"], &q, 10, RecallMode::Standard), 1.0);
        let many: QueryQrels = (0..50).map(|i| (format!("p{i}"), 1)).collect();
        let ranking: Vec<String> = (0..10).map(|i| format!("p{i}")).collect();
        let r: Vec<&str> = ranking.iter().map(String::as_str).collect();
        assert_eq!(recall_at_k(&r, &many, 10, RecallMode::Standard), 0.2);
        assert_eq!(recall_at_k(&r, &many, 10, RecallMode::Capped), 1.0);
        assert_eq!(recall_at_k(&r, &qrels(&[("x", 0)]), 10, RecallMode::Standard), 0.0);
    }

    #[test]
    fn qrels_index_keeps_highest() {
        let j = |d: &str, r| GradedJudgment {
            query_id: "q".into(),
            doctor_id: d.into(),
            relevance: r,
        };
        let idx = index_qrels(&[j("a", 1), j("a", 3), j("b", 0)]);
        assert_eq!(idx["q"]["a"], 3);
        assert_eq!(idx["q"].len(), 2);
    }

    proptest! {
        #[test]
        fn bounded_and_monotone_in_k(grades in proptest::collection::vec(0i32..6, 1..15), seed in any::<u64>()) {
            let ids: Vec<String> = (0..grades.len()).map(|i| format!("d{i}")).collect();
            let q: QueryQrels = ids.iter().cloned().zip(grades.iter().copied()).collect();
            let mut order: Vec<&str> = ids.iter().map(String::as_str).collect();
            let mut rng = crate::seed::rng_for(seed, "metrics");
            rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
            let mut prev_recall = 0.0;
            for k in 1..=grades.len() + 2 {
                let n = ndcg_at_k(&order, &q, k, GainMode::Exponential);
                prop_assert!((0.0..=1.0 + 1e-12).contains(&n));
                for mode in [RecallMode::Standard, RecallMode::Capped] {
                    let r = recall_at_k(&order, &q, k, mode);
                    prop_assert!((0.0..=1.0).contains(&r));
                }
                let r = recall_at_k(&order, &q, k, RecallMode::Standard);
                prop_assert!(r >= prev_recall);
                prev_recall = r;
            }
        }
    }
}
