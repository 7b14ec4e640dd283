use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{serialize_profile, DoctorProfile, PairKey, ProfileField};
use crate::seed::rng_for;
use crate::tokenizer::ReferenceTokenizer;

#[derive(Debug, Error)]
pub enum MiningError {
    #[error("{pair}: need {needed} pool negatives, only {available} eligible after exclusion")]
    PoolExhausted {
        pair: String,
        needed: usize,
        available: usize,
    },
    #[error("{pair}: need {needed} cross-pair donors, only {available} available")]
    CrossPairExhausted {
        pair: String,
        needed: usize,
        available: usize,
    },
    #[error("{pair}: doctor {doctor_id} appears twice in the pool")]
    DuplicatePoolEntry { pair: String, doctor_id: String },
    #[error("invalid mining parameters: {0}")]
    InvalidParams(String),
}

/// One first-stage retrieval result for a pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub doctor_id: String,
    pub profile_token_length: usize,
    pub reranker_score: f64,
}

/// A line of the pool file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolRecord {
    pub disease: String,
    pub treatment: String,
    #[serde(flatten)]
    pub entry: PoolEntry,
}

impl PoolRecord {
    pub fn pair_key(&self) -> PairKey {
        PairKey::new(self.disease.clone(), self.treatment.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiningParams {
    pub min_profile_tokens: usize,
    pub top_exclude_fraction: f64,
    pub replacement_fraction: f64,
    pub cross_pair_min_label: i32,
    pub seed: u64,
}

impl Default for MiningParams {
    fn default() -> Self {
        MiningParams {
            min_profile_tokens: 1024,
            top_exclude_fraction: 0.01,
            replacement_fraction: 0.30,
            cross_pair_min_label: 4,
            seed: 0,
        }
    }
}

impl MiningParams {
    fn validate(&self) -> Result<(), MiningError> {
        for (name, v) in [
            ("top_exclude_fraction", self.top_exclude_fraction),
            ("replacement_fraction", self.replacement_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(MiningError::InvalidParams(format!("{name} = {v} is outside [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeSource {
    Pool,
    CrossPair,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinedNegative {
    pub doctor_id: String,
    pub source: NegativeSource,
    /// Pool score; absent for cross-pair injections.
    pub reranker_score: Option<f64>,
    /// Pair the injected doctor was a positive for.
    pub donor_pair: Option<PairKey>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiningOutcome {
    pub pair_key: PairKey,
    /// Retained pool negatives in score order, then cross-pair injections.
    pub negatives: Vec<MinedNegative>,
    /// Eligible entries removed as likely false negatives.
    pub excluded_top: Vec<String>,
    pub params: MiningParams,
}

/// A line of the mining output file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiningRecord {
    pub disease: String,
    pub treatment: String,
    pub doctor_id: String,
    pub source: NegativeSource,
    pub params: MiningParams,
}

impl MiningOutcome {
    pub fn records(&self) -> Vec<MiningRecord> {
        self.negatives
            .iter()
            .map(|n| MiningRecord {
                disease: self.pair_key.disease.clone(),
                treatment: self.pair_key.treatment.clone(),
                doctor_id: n.doctor_id.clone(),
                source: n.source,
                params: self.params.clone(),
            })
            .collect()
    }
}

/// Selects as many negatives as there are positives for `pair`.
///
/// Long-profile pool entries that are not positives are ranked by reranker
/// score; the top `ceil(top_exclude_fraction * n)` are discarded as likely
/// false negatives and the next ones are taken. `round_half_up(
/// replacement_fraction * count)` of them are then swapped for high-label
/// positives of other pairs.
pub fn mine_hard_negatives(
    pair: &PairKey,
    positives: &BTreeSet<String>,
    pool: &[PoolEntry],
    other_pair_positives: &BTreeMap<PairKey, Vec<(String, i32)>>,
    params: &MiningParams,
) -> Result<MiningOutcome, MiningError> {
    params.validate()?;
    let mut seen = HashSet::new();
    for e in pool {
        if !seen.insert(e.doctor_id.as_str()) {
            return Err(MiningError::DuplicatePoolEntry {
                pair: pair.to_string(),
                doctor_id: e.doctor_id.clone(),
            });
        }
    }

    let mut eligible: Vec<&PoolEntry> = pool
        .iter()
        .filter(|e| e.profile_token_length > params.min_profile_tokens && !positives.contains(&e.doctor_id))
        .collect();
    eligible.sort_by(|a, b| {
        b.reranker_score
            .total_cmp(&a.reranker_score)
            .then_with(|| a.doctor_id.cmp(&b.doctor_id))
    });
    let exclude = (params.top_exclude_fraction * eligible.len() as f64).ceil() as usize;
    let exclude = exclude.min(eligible.len());
    let (excluded, rest) = eligible.split_at(exclude);
    let count = positives.len();
    if rest.len() < count {
        return Err(MiningError::PoolExhausted {
            pair: pair.to_string(),
            needed: count,
            available: rest.len(),
        });
    }
    let selected = &rest[..count];

    let replace = (params.replacement_fraction * count as f64 + 0.5).floor() as usize;
    let replace = replace.min(count);
    let mut rng = rng_for(params.seed, &format!("mine/{}/{}", pair.disease, pair.treatment));
    let replaced: HashSet<usize> = sample(&mut rng, count, replace).into_iter().collect();

    let blocked: HashSet<&str> = positives
        .iter()
        .map(String::as_str)
        .chain(selected.iter().map(|e| e.doctor_id.as_str()))
        .chain(excluded.iter().map(|e| e.doctor_id.as_str()))
        .collect();
    let mut donors: BTreeMap<&str, &PairKey> = BTreeMap::new();
    for (other, docs) in other_pair_positives {
        if other == pair {
            continue;
        }
        for (doc, label) in docs {
            if *label >= params.cross_pair_min_label && !blocked.contains(doc.as_str()) {
                donors.entry(doc.as_str()).or_insert(other);
            }
        }
    }
    if donors.len() < replace {
        return Err(MiningError::CrossPairExhausted {
            pair: pair.to_string(),
            needed: replace,
            available: donors.len(),
        });
    }
    let donors: Vec<(&str, &PairKey)> = donors.into_iter().collect();

    let mut negatives: Vec<MinedNegative> = selected
        .iter()
        .enumerate()
        .filter(|(i, _)| !replaced.contains(i))
        .map(|(_, e)| MinedNegative {
            doctor_id: e.doctor_id.clone(),
            source: NegativeSource::Pool,
            reranker_score: Some(e.reranker_score),
            donor_pair: None,
        })
        .collect();
    for i in sample(&mut rng, donors.len(), replace) {
        let (doc, from) = donors[i];
        negatives.push(MinedNegative {
            doctor_id: doc.to_string(),
            source: NegativeSource::CrossPair,
            reranker_score: None,
            donor_pair: Some(from.clone()),
        });
    }

    Ok(MiningOutcome {
        pair_key: pair.clone(),
        negatives,
        excluded_top: excluded.iter().map(|e| e.doctor_id.clone()).collect(),
        params: params.clone(),
    })
}

const SNIPPET_TOKENS: usize = 60;

/// CSV for manual review of mined negatives, one row per negative, with a
/// short profile snippet. The `verdict` column is left empty for reviewers.
pub fn review_sheet(outcomes: &[MiningOutcome], corpus: &HashMap<&str, &DoctorProfile>) -> Result<String, csv::Error> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "disease",
        "treatment",
        "doctor_id",
        "source",
        "reranker_score",
        "donor_pair",
        "profile_snippet",
        "verdict",
    ])?;
    for o in outcomes {
        for n in &o.negatives {
            let snippet = corpus
                .get(n.doctor_id.as_str())
                .and_then(|p| serialize_profile(p, &ProfileField::ALL, SNIPPET_TOKENS, &ReferenceTokenizer).ok())
                .map(|s| s.replace('\n', " | "))
                .unwrap_or_default();
            let source = match n.source {
                NegativeSource::Pool => "pool",
                NegativeSource::CrossPair => "cross_pair",
            };
            w.write_record([
                o.pair_key.disease.as_str(),
                o.pair_key.treatment.as_str(),
                n.doctor_id.as_str(),
                source,
                &n.reranker_score.map(|s| format!("{s:.6}")).unwrap_or_default(),
                &n.donor_pair.as_ref().map(|p| p.to_string()).unwrap_or_default(),
                &snippet,
                "",
            ])?;
        }
    }
    let bytes = w.into_inner().map_err(|e| e.into_error())?;
    Ok(String::from_utf8(bytes).expect("csv of utf-8 fields"))
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Case {
        pair: PairKey,
        positives: BTreeSet<String>,
        pool: Vec<PoolEntry>,
        others: BTreeMap<PairKey, Vec<(String, i32)>>,
    }

    fn case(n_pos: usize, n_pool: usize, n_donors: usize) -> Case {
        let positives: BTreeSet<String> = (0..n_pos).map(|i| format!("pos{i:03}")).collect();
        let mut pool: Vec<PoolEntry> = (0..n_pool)
            .map(|i| PoolEntry {
                doctor_id: format!("cand{i:03}"),
                profile_token_length: 1500,
                reranker_score: 1000.0 - i as f64,
            })
            .collect();
        // Ineligible: short, or a positive.
        pool.push(PoolEntry {
            doctor_id: "short".into(),
            profile_token_length: 1024,
            reranker_score: 5000.0,
        });
        pool.push(PoolEntry {
            doctor_id: "pos000".into(),
            profile_token_length: 4000,
            reranker_score: 5000.0,
        });
        let others = BTreeMap::from([
            (
                PairKey::new("gastric cancer", "chemotherapy"),
                (0..n_donors).map(|i| (format!("donor{i:03}"), 4 + (i % 2) as i32)).chain([("low".to_string(), 3)]).collect(),
            ),
            (PairKey::new("lung cancer", "surgery"), vec![("self".to_string(), 5)]),
        ]);
        Case {
            pair: PairKey::new("lung cancer", "surgery"),
            positives,
            pool,
            others,
        }
    }

    fn run(c: &Case, p: &MiningParams) -> Result<MiningOutcome, MiningError> {
        mine_hard_negatives(&c.pair, &c.positives, &c.pool, &c.others, p)
    }

    #[test]
    fn fifty_positives_two_hundred_pool() {
        let c = case(50, 200, 40);
        let out = run(&c, &MiningParams::default()).unwrap();
        assert_eq!(out.negatives.len(), 50);
        let cross: Vec<_> = out.negatives.iter().filter(|n| n.source == NegativeSource::CrossPair).collect();
        assert_eq!(cross.len(), 15);
        assert!(cross.iter().all(|n| n.doctor_id.starts_with("donor")));
        // ceil(0.01 * 200) = 2 excluded.
        assert_eq!(out.excluded_top, vec!["cand000", "cand001"]);
        let ids: HashSet<&str> = out.negatives.iter().map(|n| n.doctor_id.as_str()).collect();
        assert_eq!(ids.len(), 50);
        assert!(ids.iter().all(|d| !c.positives.contains(*d) && *d != "short" && *d != "self" && *d != "low"));
        assert!(out.negatives[..35].iter().all(|n| n.source == NegativeSource::Pool));
        let scores: Vec<f64> = out.negatives[..35].iter().map(|n| n.reranker_score.unwrap()).collect();
        assert!(scores.windows(2).all(|w| w[0] > w[1]));
        assert_eq!(out, run(&c, &MiningParams::default()).unwrap());
        assert_ne!(
            out.negatives,
            run(&c, &MiningParams { seed: 1, ..Default::default() }).unwrap().negatives
        );
    }

    #[test]
    fn no_exclusion_takes_top_first() {
        let c = case(5, 20, 10);
        let p = MiningParams {
            top_exclude_fraction: 0.0,
            replacement_fraction: 0.0,
            ..Default::default()
        };
        let out = run(&c, &p).unwrap();
        assert_eq!(out.negatives[0].doctor_id, "cand000");
        assert!(out.excluded_top.is_empty());
    }

    #[test]
    fn exhaustion_errors() {
        let c = case(50, 50, 40);
        assert!(matches!(
            run(&c, &MiningParams::default()),
            Err(MiningError::PoolExhausted { needed: 50, available: 49, .. })
        ));
        let c = case(50, 200, 10);
        assert!(matches!(
            run(&c, &MiningParams::default()),
            Err(MiningError::CrossPairExhausted { needed: 15, available: 10, .. })
        ));
        let mut c = case(2, 10, 5);
        c.pool.push(c.pool[0].clone());
        assert!(matches!(run(&c, &MiningParams::default()), Err(MiningError::DuplicatePoolEntry { .. })));
        assert!(run(&case(2, 10, 5), &MiningParams { replacement_fraction: 1.5, ..Default::default() }).is_err());
    }

    #[test]
    fn review_sheet_lists_each_negative() {
        let c = case(4, 20, 5);
        let p = MiningParams {
            replacement_fraction: 0.0,
            ..Default::default()
        };
        let out = run(&c, &p).unwrap();
        let doc = DoctorProfile::new("cand001").with(ProfileField::Title, "Chief Physician, \"thoracic\"");
        let corpus = HashMap::from([("cand001", &doc)]);
        let sheet = review_sheet(&[out], &corpus).unwrap();
        let mut rdr = csv::Reader::from_reader(sheet.as_bytes());
        let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
        assert_eq!(rows.len(), 4);
        assert!(rows.iter().any(|r| &r[6] == "Title: Chief Physician, \"thoracic\""));
    }
}
