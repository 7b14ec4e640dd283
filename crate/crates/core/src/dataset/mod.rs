//! Corpus, query and qrels files, validation, hard negative mining and
//! synthetic fixtures.
//!
//! On disk a dataset is `corpus.jsonl` (one [`DoctorProfile`] per line),
//! `queries.jsonl` (one [`MedicalQuery`] per line) and TREC qrels. Mining
//! additionally reads a pool file of [`PoolRecord`]s.

mod fixture;
mod mining;
mod validate;

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use thiserror::Error;

use crate::domain::{DoctorProfile, DomainError, GradedJudgment, MedicalQuery};
use crate::io::{read_jsonl, read_qrels, IoError};

pub use fixture::{generate_synthetic_fixture, Fixture, FixtureError};
pub use mining::{
    mine_hard_negatives, review_sheet, MinedNegative, MiningError, MiningOutcome, MiningParams,
    MiningRecord, NegativeSource, PoolEntry, PoolRecord,
};
pub use validate::{validate_dataset, Finding, FindingKind, Severity, ValidationReport, ValidationStatus};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Domain(#[from] DomainError),
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub corpus: Vec<DoctorProfile>,
    pub queries: Vec<MedicalQuery>,
    pub qrels: Vec<GradedJudgment>,
}

impl Dataset {
    pub fn load(corpus: &Path, queries: &Path, qrels: &Path) -> Result<Self, DatasetError> {
        Ok(Dataset {
            corpus: read_jsonl(corpus)?,
            queries: read_jsonl(queries)?,
            qrels: read_qrels(qrels)?,
        })
    }

    pub fn profiles_by_id(&self) -> HashMap<&str, &DoctorProfile> {
        self.corpus.iter().map(|p| (p.doctor_id.as_str(), p)).collect()
    }

    /// Judged doctors of each query, in qrels file order.
    pub fn candidates_by_query(&self) -> BTreeMap<&str, Vec<&str>> {
        let mut out: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        for j in &self.qrels {
            let list = out.entry(j.query_id.as_str()).or_default();
            if !list.contains(&j.doctor_id.as_str()) {
                list.push(&j.doctor_id);
            }
        }
        out
    }
}
