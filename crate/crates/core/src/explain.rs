//! Ranking criteria and rationales.
//!
//! Criteria are generated per (disease, treatment) pair, offline, and then
//! injected into every ranking prompt for that pair. Rationales are produced
//! after scoring: the predicted label is written back after the elicitation
//! prefix and the backend continues from the explanation prefix.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, Gateway, LabelLogits};
use crate::domain::{DomainError, LabelScheme, MedicalQuery, PairKey};
use crate::io::{write_atomic, IoError};
use crate::prompts;
use crate::seed::sha256_hex;
use crate::tokenizer::Tokenizer;

pub const CRITERIA_TOKEN_BUDGET: usize = 1024;
pub const RATIONALE_TOKEN_BUDGET: usize = 512;

#[derive(Debug, Error)]
pub enum ExplainError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("backend returned empty text for {0}")]
    EmptyGeneration(String),
    #[error("criteria shuffling needs at least 2 pairs, got {0}")]
    TooFewPairs(usize),
    #[error("criteria for {pair} already exist as {existing}; documents are immutable")]
    Immutable { pair: String, existing: String },
    #[error("malformed criteria document {path}: {message}")]
    Malformed { path: PathBuf, message: String },
    #[error("n must be at least 1")]
    ZeroCount,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriteriaDocument {
    pub criteria_id: String,
    pub pair_key: PairKey,
    pub text: String,
    pub generator_model: String,
    pub exemplar_id: Option<String>,
    pub created_at: String,
}

impl CriteriaDocument {
    fn build(
        pair: &PairKey,
        text: String,
        generator_model: String,
        exemplar_id: Option<String>,
        draft: usize,
    ) -> Self {
        let id_source = format!(
            "{}\u{1f}{}\u{1f}{}\u{1f}{}\u{1f}{}\u{1f}{}",
            pair.disease,
            pair.treatment,
            generator_model,
            exemplar_id.as_deref().unwrap_or(""),
            draft,
            text
        );
        CriteriaDocument {
            criteria_id: format!("crit-{}", &sha256_hex(id_source)[..16]),
            pair_key: pair.clone(),
            text,
            generator_model,
            exemplar_id,
            created_at: chrono::Utc::now().to_rfc3339(),
        }
    }

    #[cfg(test)]
    pub(crate) fn for_test(id: &str, disease: &str, treatment: &str, text: &str) -> Self {
        CriteriaDocument {
            criteria_id: id.into(),
            pair_key: PairKey::new(disease, treatment),
            text: text.into(),
            generator_model: "test".into(),
            exemplar_id: None,
            created_at: String::new(),
        }
    }
}

fn budgeted_text(raw: &str, budget: usize, tokenizer: &dyn Tokenizer) -> String {
    tokenizer.truncate(raw.trim(), budget).trim_end().to_string()
}

/// `n` independent drafts for one pair, in generation order.
///
/// Decoding is greedy, so each draft's prompt carries its draft number to
/// make the requests (and their cache entries) distinct.
pub fn generate_criteria_candidates(
    gateway: &Gateway,
    pair: &PairKey,
    n: usize,
    budget: usize,
) -> Result<Vec<CriteriaDocument>, ExplainError> {
    if n == 0 {
        return Err(ExplainError::ZeroCount);
    }
    let tokenizer = gateway.tokenizer();
    (0..n)
        .map(|i| {
            let prompt = prompts::criteria_prompt(pair, Some((i, n)));
            let out = gateway.generate_text(&prompt, budget)?;
            let text = budgeted_text(&out.text, budget, tokenizer.as_ref());
            if text.is_empty() {
                return Err(ExplainError::EmptyGeneration(pair.to_string()));
            }
            Ok(CriteriaDocument::build(pair, text, gateway.identity(), None, i))
        })
        .collect()
}

/// Criteria for `pair`, written with `exemplar` shown as a worked example.
pub fn generate_criteria_oneshot(
    gateway: &Gateway,
    pair: &PairKey,
    exemplar: &CriteriaDocument,
    budget: usize,
) -> Result<CriteriaDocument, ExplainError> {
    let prompt = prompts::criteria_oneshot_prompt(pair, &exemplar.pair_key, &exemplar.text);
    let out = gateway.generate_text(&prompt, budget)?;
    let text = budgeted_text(&out.text, budget, gateway.tokenizer().as_ref());
    if text.is_empty() {
        return Err(ExplainError::EmptyGeneration(pair.to_string()));
    }
    Ok(CriteriaDocument::build(
        pair,
        text,
        gateway.identity(),
        Some(exemplar.criteria_id.clone()),
        0,
    ))
}

/// Reassigns documents so that no pair keeps its own (a derangement).
///
/// Keys are taken in sorted order and permuted with Sattolo's algorithm,
/// which only produces single-cycle permutations.
pub fn shuffle_criteria_assignment(
    assignment: &BTreeMap<PairKey, CriteriaDocument>,
    seed: u64,
) -> Result<BTreeMap<PairKey, CriteriaDocument>, ExplainError> {
    let n = assignment.len();
    if n < 2 {
        return Err(ExplainError::TooFewPairs(n));
    }
    let keys: Vec<&PairKey> = assignment.keys().collect();
    let mut source: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..n).rev() {
        let j = rng.gen_range(0..i);
        source.swap(i, j);
    }
    Ok(keys
        .iter()
        .enumerate()
        .map(|(i, k)| ((*k).clone(), assignment[keys[source[i]]].clone()))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rationale {
    pub query_id: String,
    pub doctor_id: String,
    pub predicted_label: String,
    pub text: String,
}

/// The generation prompt for a rationale: the ranking prompt completed with
/// the argmax label, then the explanation prefix.
pub fn rationale_request(
    query: &MedicalQuery,
    profile_text: &str,
    logits: &LabelLogits,
    scheme: &LabelScheme,
    criteria: Option<&CriteriaDocument>,
) -> (String, String) {
    let label = scheme.labels()[logits.argmax()].name.clone();
    let ranking = prompts::ranking_prompt(
        query.rendered_text(),
        profile_text,
        scheme,
        criteria.map(|c| c.text.as_str()),
    );
    (prompts::rationale_prompt(&ranking, &label), label)
}

#[allow(clippy::too_many_arguments)]
pub fn generate_rationale(
    gateway: &Gateway,
    query: &MedicalQuery,
    doctor_id: &str,
    profile_text: &str,
    logits: &LabelLogits,
    scheme: &LabelScheme,
    criteria: Option<&CriteriaDocument>,
    budget: usize,
) -> Result<Rationale, ExplainError> {
    if logits.len() != scheme.len() {
        return Err(DomainError::InvalidScheme(format!(
            "logits have {} entries, scheme has {} labels",
            logits.len(),
            scheme.len()
        ))
        .into());
    }
    let (prompt, label) = rationale_request(query, profile_text, logits, scheme, criteria);
    let out = gateway.generate_text(&prompt, budget)?;
    let tokenizer = gateway.tokenizer();
    let text = tokenizer
        .truncate(&format!("1.{}", out.text), budget)
        .to_string();
    Ok(Rationale {
        query_id: query.query_id.clone(),
        doctor_id: doctor_id.to_string(),
        predicted_label: label,
        text,
    })
}

/// URL-safe file stem for a pair.
pub fn pair_digest(pair: &PairKey) -> String {
    sha256_hex(format!("{}\u{1f}{}", pair.disease, pair.treatment))[..16].to_string()
}

/// Directory of criteria documents: one active document per pair at
/// `<dir>/<pair digest>.json`, drafts under `<dir>/candidates/<pair digest>/`,
/// and assignment manifests under `<dir>/manifests/`.
pub struct CriteriaStore {
    dir: PathBuf,
}

impl CriteriaStore {
    pub fn open(dir: impl Into<PathBuf>) -> Self {
        CriteriaStore { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn active_path(&self, pair: &PairKey) -> PathBuf {
        self.dir.join(format!("{}.json", pair_digest(pair)))
    }

    fn read_doc(path: &Path) -> Result<CriteriaDocument, ExplainError> {
        let text = fs::read_to_string(path).map_err(|e| IoError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| ExplainError::Malformed {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn load(&self, pair: &PairKey) -> Result<Option<CriteriaDocument>, ExplainError> {
        let path = self.active_path(pair);
        if !path.exists() {
            return Ok(None);
        }
        Self::read_doc(&path).map(Some)
    }

    /// Stores `doc` as the active document of its pair. An existing document
    /// with a different id is never overwritten.
    pub fn save(&self, doc: &CriteriaDocument) -> Result<(), ExplainError> {
        if let Some(existing) = self.load(&doc.pair_key)? {
            if existing.criteria_id == doc.criteria_id {
                return Ok(());
            }
            return Err(ExplainError::Immutable {
                pair: doc.pair_key.to_string(),
                existing: existing.criteria_id,
            });
        }
        let bytes = serde_json::to_vec_pretty(doc).expect("criteria serialize");
        write_atomic(&self.active_path(&doc.pair_key), &bytes)?;
        Ok(())
    }

    pub fn save_candidate(&self, doc: &CriteriaDocument, index: usize) -> Result<PathBuf, ExplainError> {
        let path = self
            .dir
            .join("candidates")
            .join(pair_digest(&doc.pair_key))
            .join(format!("{index:03}.json"));
        let bytes = serde_json::to_vec_pretty(doc).expect("criteria serialize");
        write_atomic(&path, &bytes)?;
        Ok(path)
    }

    pub fn load_candidates(&self, pair: &PairKey) -> Result<Vec<CriteriaDocument>, ExplainError> {
        let dir = self.dir.join("candidates").join(pair_digest(pair));
        if !dir.exists() {
            return Ok(Vec::new());
        }
        let mut paths: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(|e| IoError::io(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        paths.sort();
        paths.iter().map(|p| Self::read_doc(p)).collect()
    }

    /// Every active document, keyed by pair.
    pub fn load_all(&self) -> Result<BTreeMap<PairKey, CriteriaDocument>, ExplainError> {
        let mut out = BTreeMap::new();
        if !self.dir.exists() {
            return Ok(out);
        }
        let mut paths: Vec<PathBuf> = fs::read_dir(&self.dir)
            .map_err(|e| IoError::io(&self.dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "json"))
            .collect();
        paths.sort();
        for p in paths {
            let doc = Self::read_doc(&p)?;
            out.insert(doc.pair_key.clone(), doc);
        }
        Ok(out)
    }

    pub fn manifest_path(&self, name: &str) -> PathBuf {
        self.dir.join("manifests").join(format!("{name}.json"))
    }

    pub fn write_manifest(&self, name: &str, manifest: &AssignmentManifest) -> Result<PathBuf, ExplainError> {
        let path = self.manifest_path(name);
        let bytes = serde_json::to_vec_pretty(manifest).expect("manifest serializes");
        write_atomic(&path, &bytes)?;
        Ok(path)
    }
}

/// Which criteria document each pair uses, without copying documents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignmentManifest {
    pub seed: u64,
    pub entries: Vec<AssignmentEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignmentEntry {
    pub pair_key: PairKey,
    pub criteria_id: String,
    pub source_pair: PairKey,
}

impl AssignmentManifest {
    pub fn from_assignment(seed: u64, assignment: &BTreeMap<PairKey, CriteriaDocument>) -> Self {
        AssignmentManifest {
            seed,
            entries: assignment
                .iter()
                .map(|(k, d)| AssignmentEntry {
                    pair_key: k.clone(),
                    criteria_id: d.criteria_id.clone(),
                    source_pair: d.pair_key.clone(),
                })
                .collect(),
        }
    }

    pub fn fixed_points(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.pair_key == e.source_pair)
            .count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{NoiseBackend, OracleBackend};
    use crate::tokenizer::ReferenceTokenizer;
    use std::sync::Arc;

    fn oracle_gw() -> Gateway {
        Gateway::new(Arc::new(OracleBackend::new("o", [])), 2, 20)
    }

    fn lung() -> PairKey {
        PairKey::new("lung cancer", "surgical treatment")
    }

    fn docs(n: usize) -> BTreeMap<PairKey, CriteriaDocument> {
        (0..n)
            .map(|i| {
                let d = CriteriaDocument::for_test(&format!("c{i}"), &format!("disease {i:02}"), "surgery", "x");
                (d.pair_key.clone(), d)
            })
            .collect()
    }

    #[test]
    fn candidates_are_stable_and_budgeted() {
        let gw = oracle_gw();
        let a = generate_criteria_candidates(&gw, &lung(), 3, 1024).unwrap();
        assert_eq!(a.len(), 3);
        assert_eq!(gw.stats().generate_calls, 3);
        for d in &a {
            assert!(d.text.contains("lung cancer") && d.text.contains("surgical treatment"));
            assert!(ReferenceTokenizer.count(&d.text) <= 1024);
        }
        let b = generate_criteria_candidates(&gw, &lung(), 3, 1024).unwrap();
        let ids = |v: &[CriteriaDocument]| v.iter().map(|d| d.criteria_id.clone()).collect::<Vec<_>>();
        assert_eq!(ids(&a), ids(&b));
        let short = generate_criteria_candidates(&gw, &lung(), 1, 8).unwrap();
        assert!(ReferenceTokenizer.count(&short[0].text) <= 8);
        assert!(matches!(
            generate_criteria_candidates(&gw, &lung(), 0, 8),
            Err(ExplainError::ZeroCount)
        ));
    }

    #[test]
    fn oneshot_records_exemplar() {
        let gw = oracle_gw();
        let ex = generate_criteria_candidates(&gw, &lung(), 1, 1024).unwrap().remove(0);
        let pair = PairKey::new("gastric cancer", "chemotherapy");
        let d = generate_criteria_oneshot(&gw, &pair, &ex, 1024).unwrap();
        assert_eq!(d.exemplar_id.as_deref(), Some(ex.criteria_id.as_str()));
        assert!(d.text.contains("gastric cancer") && d.text.contains("chemotherapy"));
        assert!(ReferenceTokenizer.count(&d.text) <= 1024);
    }

    #[test]
    fn shuffle_is_a_seeded_derangement() {
        let two = docs(2);
        let s = shuffle_criteria_assignment(&two, 5).unwrap();
        let keys: Vec<_> = two.keys().collect();
        assert_eq!(s[keys[0]].criteria_id, "c1");
        assert_eq!(s[keys[1]].criteria_id, "c0");

        let many = docs(38);
        let a = shuffle_criteria_assignment(&many, 7).unwrap();
        let b = shuffle_criteria_assignment(&many, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(AssignmentManifest::from_assignment(7, &a).fixed_points(), 0);
        let mut used: Vec<_> = a.values().map(|d| d.criteria_id.clone()).collect();
        used.sort();
        used.dedup();
        assert_eq!(used.len(), 38);

        assert!(matches!(
            shuffle_criteria_assignment(&docs(1), 0),
            Err(ExplainError::TooFewPairs(1))
        ));
    }

    #[test]
    fn rationale_uses_argmax_and_prefix() {
        let gw = oracle_gw();
        let q = MedicalQuery::new("q", "lung cancer", "surgery", None).unwrap();
        let s = LabelScheme::default();
        let logits = LabelLogits::observed(vec![-3.0, -2.0, -4.0, -1.0, 0.5]);
        let (prompt, label) = rationale_request(&q, "Title: x", &logits, &s, None);
        assert_eq!(label, "Top");
        assert!(prompt.ends_with("Top.\n\nThe reasons are as follows.\n1."));
        let r = generate_rationale(&gw, &q, "d1", "Title: x", &logits, &s, None, 512).unwrap();
        assert_eq!(r.predicted_label, "Top");
        assert!(r.text.starts_with("1.") && r.text.contains("Top"));
        assert_eq!(gw.stats().logprob_calls, 0);

        let noisy = Gateway::new(Arc::new(NoiseBackend::new(3, "n")), 1, 20);
        let r = generate_rationale(&noisy, &q, "d1", "Title: x", &logits, &s, None, 4).unwrap();
        assert!(r.text.starts_with("1.") && ReferenceTokenizer.count(&r.text) <= 4);
    }

    #[test]
    fn store_keeps_documents_immutable() {
        let dir = tempfile::tempdir().unwrap();
        let store = CriteriaStore::open(dir.path());
        let d = CriteriaDocument::for_test("c1", "lung cancer", "surgery", "text");
        store.save(&d).unwrap();
        store.save(&d).unwrap();
        let other = CriteriaDocument::for_test("c2", "lung cancer", "surgery", "other");
        assert!(matches!(store.save(&other), Err(ExplainError::Immutable { .. })));
        assert_eq!(store.load(&d.pair_key).unwrap().unwrap(), d);
        store.save_candidate(&other, 1).unwrap();
        assert_eq!(store.load_candidates(&d.pair_key).unwrap(), vec![other]);
        assert_eq!(store.load_all().unwrap().len(), 1);
        let name = store.active_path(&d.pair_key);
        let stem = name.file_stem().unwrap().to_str().unwrap();
        assert!(stem.chars().all(|c| c.is_ascii_hexdigit()));
    }
}
