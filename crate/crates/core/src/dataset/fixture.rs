//! Deterministic synthetic datasets shaped like the real one: one query per
//! (disease, treatment) pair, balanced relevance strata per query, profile
//! text and length that grow with relevance, and a first-stage pool whose
//! scores track the labels.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use thiserror::Error;

use super::mining::{PoolEntry, PoolRecord};
use crate::domain::{serialize_profile, DoctorProfile, GradedJudgment, MedicalQuery, ProfileField};
use crate::io::{format_qrels, to_jsonl, write_atomic, IoError};
use crate::seed::rng_for;
use crate::tokenizer::{ReferenceTokenizer, Tokenizer};

#[derive(Debug, Error)]
pub enum FixtureError {
    #[error("fixture precondition violated: {0}")]
    Precondition(String),
    #[error(transparent)]
    Io(#[from] IoError),
}

const DISEASES: [&str; 19] = [
    "lung cancer",
    "gastric cancer",
    "colorectal cancer",
    "liver cancer",
    "breast cancer",
    "thyroid cancer",
    "esophageal cancer",
    "pancreatic cancer",
    "cervical cancer",
    "prostate cancer",
    "coronary heart disease",
    "atrial fibrillation",
    "type 2 diabetes",
    "rheumatoid arthritis",
    "lumbar disc herniation",
    "cerebral infarction",
    "chronic kidney disease",
    "glaucoma",
    "psoriasis",
];

const TREATMENTS: [&str; 4] = [
    "surgical treatment",
    "drug therapy",
    "radiotherapy",
    "interventional therapy",
];

const TITLES: [&str; 6] = [
    "Resident Physician",
    "Attending Physician",
    "Attending Physician",
    "Associate Chief Physician",
    "Chief Physician",
    "Chief Physician",
];

const UNRELATED: [&str; 6] = [
    "sports injuries",
    "pediatric asthma",
    "cataract",
    "dental implants",
    "sleep disorders",
    "allergic rhinitis",
];

#[derive(Debug, Clone)]
pub struct Fixture {
    pub corpus: Vec<DoctorProfile>,
    pub queries: Vec<MedicalQuery>,
    pub qrels: Vec<GradedJudgment>,
    pub pool: Vec<PoolRecord>,
}

impl Fixture {
    /// Writes `corpus.jsonl`, `queries.jsonl`, `qrels.txt` and `pool.jsonl`.
    pub fn write(&self, dir: &Path) -> Result<(), FixtureError> {
        write_atomic(&dir.join("corpus.jsonl"), to_jsonl(&self.corpus).as_bytes())?;
        write_atomic(&dir.join("queries.jsonl"), to_jsonl(&self.queries).as_bytes())?;
        write_atomic(&dir.join("qrels.txt"), format_qrels(&self.qrels).as_bytes())?;
        write_atomic(&dir.join("pool.jsonl"), to_jsonl(&self.pool).as_bytes())?;
        Ok(())
    }
}

fn pair_for(i: usize) -> (String, String) {
    let d = DISEASES[i % DISEASES.len()];
    let t = TREATMENTS[(i / DISEASES.len()) % TREATMENTS.len()];
    let cohort = i / (DISEASES.len() * TREATMENTS.len());
    if cohort == 0 {
        (d.to_string(), t.to_string())
    } else {
        (format!("{d} type {}", cohort + 1), t.to_string())
    }
}

fn profile(
    rng: &mut impl Rng,
    doctor_id: &str,
    disease: &str,
    treatment: &str,
    level: usize,
    levels: usize,
) -> DoctorProfile {
    // Position of this label within the scale, 0..=5.
    let tier = if levels > 1 { level * 5 / (levels - 1) } else { 5 };
    let other = UNRELATED[rng.gen_range(0..UNRELATED.len())];
    let expertise = match tier {
        0 => format!("Diagnosis and management of {other}."),
        1 | 2 => format!("General care of patients with {disease}; also sees {other}."),
        3 => format!("Management of {disease}, including {treatment} in selected cases."),
        _ => format!("Specialist in {treatment} for {disease}, with a high annual case volume."),
    };
    let mut research = String::new();
    let sentences = 8 + tier * 9 + rng.gen_range(0..12);
    for s in 0..sentences {
        let topic = if s % (6 - tier.min(5)) == 0 { disease } else { other };
        write!(
            research,
            "Study {s} of physician {doctor_id} examined outcomes and complications in patients with {topic} across several regional hospitals. "
        )
        .unwrap();
    }
    DoctorProfile::new(doctor_id)
        .with(ProfileField::Title, TITLES[tier])
        .with(ProfileField::Specialty, if tier >= 1 { disease.to_string() } else { other.to_string() })
        .with(ProfileField::Affiliation, format!("Teaching Hospital No. {}", rng.gen_range(1..40)))
        .with(ProfileField::Department, format!("Department {}", rng.gen_range(1..12)))
        .with(ProfileField::Introduction, format!("Physician {doctor_id} has practised for {} years.", 3 + tier * 4 + rng.gen_range(0..5)))
        .with(ProfileField::Expertise, expertise)
        .with(ProfileField::Research, research.trim_end().to_string())
}

/// Builds `n_queries` queries with `docs_per_query` judged doctors each.
/// Doctor `j` of a query gets `label_levels[j % L]`, so strata are balanced.
/// Each query's pool holds its own doctors plus a sample of three times as
/// many doctors from other queries.
pub fn generate_synthetic_fixture(
    seed: u64,
    n_queries: usize,
    docs_per_query: usize,
    label_levels: &[i32],
) -> Result<Fixture, FixtureError> {
    if n_queries == 0 {
        return Err(FixtureError::Precondition("n_queries must be at least 1".into()));
    }
    if label_levels.is_empty() || docs_per_query < label_levels.len() {
        return Err(FixtureError::Precondition(format!(
            "docs_per_query ({docs_per_query}) must be at least the number of label levels ({})",
            label_levels.len()
        )));
    }
    let mut rng = rng_for(seed, "fixture");
    let mut corpus = Vec::with_capacity(n_queries * docs_per_query);
    let mut queries = Vec::with_capacity(n_queries);
    let mut qrels = Vec::with_capacity(n_queries * docs_per_query);
    let mut lengths = Vec::with_capacity(n_queries * docs_per_query);
    for qi in 0..n_queries {
        let (disease, treatment) = pair_for(qi);
        let qid = format!("q{qi:03}");
        queries.push(
            MedicalQuery::new(qid.clone(), disease.clone(), treatment.clone(), None)
                .map_err(|e| FixtureError::Precondition(e.to_string()))?,
        );
        for j in 0..docs_per_query {
            let level = j % label_levels.len();
            let doctor_id = format!("doc-{qi:03}-{j:03}");
            let p = profile(&mut rng, &doctor_id, &disease, &treatment, level, label_levels.len());
            let full = serialize_profile(&p, &ProfileField::ALL, usize::MAX, &ReferenceTokenizer)
                .expect("fixture profiles are non-empty");
            lengths.push(ReferenceTokenizer.count(&full));
            qrels.push(GradedJudgment {
                query_id: qid.clone(),
                doctor_id,
                relevance: label_levels[level],
            });
            corpus.push(p);
        }
    }

    let mut pool = Vec::new();
    let total = corpus.len();
    let extra = (3 * docs_per_query).min(total - docs_per_query);
    for (qi, q) in queries.iter().enumerate() {
        let own = qi * docs_per_query..(qi + 1) * docs_per_query;
        let mut push = |idx: usize, score: f64| {
            pool.push(PoolRecord {
                disease: q.disease.clone(),
                treatment: q.treatment.clone(),
                entry: PoolEntry {
                    doctor_id: corpus[idx].doctor_id.clone(),
                    profile_token_length: lengths[idx],
                    reranker_score: (score * 1e6).round() / 1e6,
                },
            });
        };
        let max_level = label_levels.iter().copied().max().unwrap_or(1).max(1) as f64;
        for idx in own.clone() {
            let rel = qrels[idx].relevance as f64 / max_level;
            push(idx, rel * 0.8 + rng.gen_range(0.0..0.4));
        }
        let others: Vec<usize> = (0..total).filter(|i| !own.contains(i)).collect();
        let mut picked: Vec<usize> = sample(&mut rng, others.len(), extra).into_iter().map(|i| others[i]).collect();
        picked.sort_unstable();
        for idx in picked {
            push(idx, rng.gen_range(0.0..0.9));
        }
    }

    Ok(Fixture {
        corpus,
        queries,
        qrels,
        pool,
    })
}
