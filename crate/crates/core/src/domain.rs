//! Core records and the text construction rules applied to them.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tokenizer::Tokenizer;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DomainError {
    #[error("every listed profile field is empty for doctor {0}")]
    AllFieldsEmpty(String),
    #[error("field `{0}` must not be empty")]
    EmptyField(&'static str),
    #[error("unknown profile field `{0}`")]
    UnknownField(String),
    #[error("token budget must be positive")]
    ZeroBudget,
    #[error("invalid label scheme: {0}")]
    InvalidScheme(String),
    #[error("duplicate doctor_id `{0}` in ranked list")]
    DuplicateDoctor(String),
}

/// The nine text fields of a doctor profile.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileField {
    Title,
    Specialty,
    Affiliation,
    Department,
    Introduction,
    Expertise,
    SocialService,
    Awards,
    Research,
}

impl ProfileField {
    pub const ALL: [ProfileField; 9] = [
        ProfileField::Title,
        ProfileField::Specialty,
        ProfileField::Affiliation,
        ProfileField::Department,
        ProfileField::Introduction,
        ProfileField::Expertise,
        ProfileField::SocialService,
        ProfileField::Awards,
        ProfileField::Research,
    ];

    pub fn display_key(self) -> &'static str {
        match self {
            ProfileField::Title => "Title",
            ProfileField::Specialty => "Specialty",
            ProfileField::Affiliation => "Affiliation",
            ProfileField::Department => "Department",
            ProfileField::Introduction => "Introduction",
            ProfileField::Expertise => "Expertise",
            ProfileField::SocialService => "Social Service",
            ProfileField::Awards => "Awards",
            ProfileField::Research => "Research",
        }
    }

    pub fn json_key(self) -> &'static str {
        match self {
            ProfileField::Title => "title",
            ProfileField::Specialty => "specialty",
            ProfileField::Affiliation => "affiliation",
            ProfileField::Department => "department",
            ProfileField::Introduction => "introduction",
            ProfileField::Expertise => "expertise",
            ProfileField::SocialService => "social_service",
            ProfileField::Awards => "awards",
            ProfileField::Research => "research",
        }
    }
}

impl FromStr for ProfileField {
    type Err = DomainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ProfileField::ALL
            .into_iter()
            .find(|f| f.json_key() == s || f.display_key() == s)
            .ok_or_else(|| DomainError::UnknownField(s.to_string()))
    }
}

/// A candidate doctor. Absent and null fields are both read as empty.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DoctorProfile {
    pub doctor_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub title: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub specialty: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub affiliation: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub department: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub introduction: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expertise: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub social_service: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub awards: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub research: Option<String>,
}

impl DoctorProfile {
    pub fn new(doctor_id: impl Into<String>) -> Self {
        DoctorProfile {
            doctor_id: doctor_id.into(),
            ..Default::default()
        }
    }

    pub fn field(&self, field: ProfileField) -> &str {
        let v = match field {
            ProfileField::Title => &self.title,
            ProfileField::Specialty => &self.specialty,
            ProfileField::Affiliation => &self.affiliation,
            ProfileField::Department => &self.department,
            ProfileField::Introduction => &self.introduction,
            ProfileField::Expertise => &self.expertise,
            ProfileField::SocialService => &self.social_service,
            ProfileField::Awards => &self.awards,
            ProfileField::Research => &self.research,
        };
        v.as_deref().unwrap_or("")
    }

    pub fn set(&mut self, field: ProfileField, value: impl Into<String>) -> &mut Self {
        let slot = match field {
            ProfileField::Title => &mut self.title,
            ProfileField::Specialty => &mut self.specialty,
            ProfileField::Affiliation => &mut self.affiliation,
            ProfileField::Department => &mut self.department,
            ProfileField::Introduction => &mut self.introduction,
            ProfileField::Expertise => &mut self.expertise,
            ProfileField::SocialService => &mut self.social_service,
            ProfileField::Awards => &mut self.awards,
            ProfileField::Research => &mut self.research,
        };
        *slot = Some(value.into());
        self
    }

    pub fn with(mut self, field: ProfileField, value: impl Into<String>) -> Self {
        self.set(field, value);
        self
    }

    pub fn is_empty(&self) -> bool {
        ProfileField::ALL
            .iter()
            .all(|f| self.field(*f).trim().is_empty())
    }
}

/// Renders a profile as `Key: value` lines in `field_order`, skipping empty
/// fields, then truncates the result to `token_budget` tokens of `tokenizer`.
pub fn serialize_profile(
    profile: &DoctorProfile,
    field_order: &[ProfileField],
    token_budget: usize,
    tokenizer: &dyn Tokenizer,
) -> Result<String, DomainError> {
    if token_budget == 0 {
        return Err(DomainError::ZeroBudget);
    }
    let lines: Vec<String> = field_order
        .iter()
        .filter_map(|f| {
            let value = profile.field(*f).trim();
            (!value.is_empty()).then(|| format!("{}: {}", f.display_key(), value))
        })
        .collect();
    if lines.is_empty() {
        return Err(DomainError::AllFieldsEmpty(profile.doctor_id.clone()));
    }
    let full = lines.join("\n");
    Ok(tokenizer.truncate(&full, token_budget).to_string())
}

/// A (disease, treatment) pair; one query and one criteria document per pair.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PairKey {
    pub disease: String,
    pub treatment: String,
}

impl PairKey {
    pub fn new(disease: impl Into<String>, treatment: impl Into<String>) -> Self {
        PairKey {
            disease: disease.into(),
            treatment: treatment.into(),
        }
    }
}

impl fmt::Display for PairKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.disease, self.treatment)
    }
}

/// A patient need. `rendered_text` is always derived from the other fields.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MedicalQuery {
    pub query_id: String,
    pub disease: String,
    pub treatment: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sensitive_prefix: Option<String>,
    #[serde(skip)]
    rendered_text: String,
}

impl MedicalQuery {
    pub fn new(
        query_id: impl Into<String>,
        disease: impl Into<String>,
        treatment: impl Into<String>,
        sensitive_prefix: Option<String>,
    ) -> Result<Self, DomainError> {
        let disease = disease.into();
        let treatment = treatment.into();
        let rendered_text = render_query(&disease, &treatment, sensitive_prefix.as_deref())?;
        Ok(MedicalQuery {
            query_id: query_id.into(),
            disease,
            treatment,
            sensitive_prefix,
            rendered_text,
        })
    }

    pub fn rendered_text(&self) -> &str {
        &self.rendered_text
    }

    pub fn pair_key(&self) -> PairKey {
        PairKey::new(self.disease.clone(), self.treatment.clone())
    }

    /// The same need, re-rendered with a different sensitive prefix.
    pub fn with_prefix(&self, prefix: Option<&str>) -> Self {
        MedicalQuery::new(
            self.query_id.clone(),
            self.disease.clone(),
            self.treatment.clone(),
            prefix.map(str::to_string),
        )
        .expect("fields already validated")
    }
}

impl<'de> Deserialize<'de> for MedicalQuery {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            query_id: String,
            disease: String,
            treatment: String,
            #[serde(default)]
            sensitive_prefix: Option<String>,
        }
        let raw = Raw::deserialize(d)?;
        MedicalQuery::new(raw.query_id, raw.disease, raw.treatment, raw.sensitive_prefix)
            .map_err(serde::de::Error::custom)
    }
}

/// `I want to find a doctor specializing in {treatment} for {disease}.`,
/// optionally preceded by a sensitive prefix and a single space.
pub fn render_query(
    disease: &str,
    treatment: &str,
    sensitive_prefix: Option<&str>,
) -> Result<String, DomainError> {
    let disease = disease.trim();
    let treatment = treatment.trim();
    if disease.is_empty() {
        return Err(DomainError::EmptyField("disease"));
    }
    if treatment.is_empty() {
        return Err(DomainError::EmptyField("treatment"));
    }
    let core = format!("I want to find a doctor specializing in {treatment} for {disease}.");
    Ok(match sensitive_prefix.map(str::trim).filter(|p| !p.is_empty()) {
        Some(prefix) => format!("{prefix} {core}"),
        None => core,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Label {
    pub name: String,
    pub score: f64,
}

/// Ordered graded labels, least relevant first.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LabelScheme {
    labels: Vec<Label>,
}

impl LabelScheme {
    pub fn new(labels: Vec<(impl Into<String>, f64)>) -> Result<Self, DomainError> {
        let labels: Vec<Label> = labels
            .into_iter()
            .map(|(name, score)| Label {
                name: name.into(),
                score,
            })
            .collect();
        if !(2..=5).contains(&labels.len()) {
            return Err(DomainError::InvalidScheme(format!(
                "expected 2 to 5 labels, got {}",
                labels.len()
            )));
        }
        let mut seen = HashSet::new();
        for l in &labels {
            if l.name.trim().is_empty() {
                return Err(DomainError::InvalidScheme("empty label name".into()));
            }
            if !seen.insert(l.name.as_str()) {
                return Err(DomainError::InvalidScheme(format!(
                    "duplicate label `{}`",
                    l.name
                )));
            }
            if !l.score.is_finite() {
                return Err(DomainError::InvalidScheme("non-finite score".into()));
            }
        }
        if labels.windows(2).any(|w| w[1].score <= w[0].score) {
            return Err(DomainError::InvalidScheme(
                "scores must strictly increase".into(),
            ));
        }
        Ok(LabelScheme { labels })
    }

    /// Labels scored with consecutive integers from 0, least relevant first.
    pub fn from_names(names: &[&str]) -> Result<Self, DomainError> {
        LabelScheme::new(
            names
                .iter()
                .enumerate()
                .map(|(k, n)| (n.to_string(), k as f64))
                .collect(),
        )
    }

    /// Top / High / Mid / Low / Not Relevant.
    pub fn five_level() -> Self {
        LabelScheme::from_names(&["Not Relevant", "Low", "Mid", "High", "Top"]).unwrap()
    }

    pub fn four_level() -> Self {
        LabelScheme::from_names(&["Not Relevant", "Low", "Mid", "High"]).unwrap()
    }

    pub fn three_level() -> Self {
        LabelScheme::from_names(&["Not Relevant", "Low", "High"]).unwrap()
    }

    pub fn two_level() -> Self {
        LabelScheme::from_names(&["Not Relevant", "High"]).unwrap()
    }

    /// Ablation schemes by label count (2 to 5).
    pub fn with_levels(n: usize) -> Result<Self, DomainError> {
        match n {
            5 => Ok(Self::five_level()),
            4 => Ok(Self::four_level()),
            3 => Ok(Self::three_level()),
            2 => Ok(Self::two_level()),
            _ => Err(DomainError::InvalidScheme(format!(
                "no built-in scheme with {n} labels"
            ))),
        }
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.labels.iter().map(|l| l.name.as_str())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.labels.iter().position(|l| l.name == name)
    }

    pub fn min_score(&self) -> f64 {
        self.labels[0].score
    }

    pub fn max_score(&self) -> f64 {
        self.labels[self.labels.len() - 1].score
    }
}

impl Default for LabelScheme {
    fn default() -> Self {
        Self::five_level()
    }
}

impl<'de> Deserialize<'de> for LabelScheme {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            labels: Vec<Label>,
        }
        let raw = Raw::deserialize(d)?;
        LabelScheme::new(raw.labels.into_iter().map(|l| (l.name, l.score)).collect())
            .map_err(serde::de::Error::custom)
    }
}

/// One qrels row. Range checks happen in dataset validation so that
/// malformed files can be reported rather than rejected on load.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GradedJudgment {
    pub query_id: String,
    pub doctor_id: String,
    pub relevance: i32,
}

pub const MAX_RELEVANCE: i32 = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    pub doctor_id: String,
    pub score: f64,
    pub label_probs: Vec<f64>,
    pub predicted_label: String,
}

/// Descending score, ties broken by ascending doctor_id (bytewise).
pub fn rank_order(a_score: f64, a_id: &str, b_score: f64, b_id: &str) -> Ordering {
    b_score
        .total_cmp(&a_score)
        .then_with(|| a_id.as_bytes().cmp(b_id.as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub query_id: String,
    entries: Vec<ScoredCandidate>,
}

impl RankedList {
    /// Sorts `entries` into rank order. Duplicated doctor ids are rejected.
    pub fn new(
        query_id: impl Into<String>,
        mut entries: Vec<ScoredCandidate>,
    ) -> Result<Self, DomainError> {
        let mut seen = HashSet::with_capacity(entries.len());
        for e in &entries {
            if !seen.insert(e.doctor_id.as_str()) {
                return Err(DomainError::DuplicateDoctor(e.doctor_id.clone()));
            }
        }
        entries.sort_by(|a, b| rank_order(a.score, &a.doctor_id, b.score, &b.doctor_id));
        Ok(RankedList {
            query_id: query_id.into(),
            entries,
        })
    }

    /// Wraps an ordering produced by a comparison strategy, attaching
    /// synthetic scores `N - position`.
    pub fn from_order(query_id: impl Into<String>, order: Vec<String>) -> Result<Self, DomainError> {
        let n = order.len();
        let entries = order
            .into_iter()
            .enumerate()
            .map(|(pos, doctor_id)| ScoredCandidate {
                doctor_id,
                score: (n - pos) as f64,
                label_probs: Vec::new(),
                predicted_label: String::new(),
            })
            .collect();
        RankedList::new(query_id, entries)
    }

    pub fn entries(&self) -> &[ScoredCandidate] {
        &self.entries
    }

    pub fn doctor_ids(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.doctor_id.as_str()).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::{CharBudget, ReferenceTokenizer};
    use proptest::prelude::*;

    #[test]
    fn serializes_key_value_lines() {
        let p = DoctorProfile::new("d1")
            .with(ProfileField::Title, "Chief Physician")
            .with(ProfileField::Specialty, "Respiratory Medicine");
        let s = serialize_profile(&p, &ProfileField::ALL, 2048, &ReferenceTokenizer).unwrap();
        assert_eq!(s, "Title: Chief Physician\nSpecialty: Respiratory Medicine");
    }

    #[test]
    fn single_field_and_custom_order() {
        let p = DoctorProfile::new("d1").with(ProfileField::Introduction, "Thoracic surgeon.");
        let s = serialize_profile(&p, &ProfileField::ALL, 2048, &ReferenceTokenizer).unwrap();
        assert_eq!(s, "Introduction: Thoracic surgeon.");

        let p = p.with(ProfileField::Awards, "Prize");
        let order = [ProfileField::Awards, ProfileField::Introduction];
        let s = serialize_profile(&p, &order, 2048, &ReferenceTokenizer).unwrap();
        assert_eq!(s, "Awards: Prize\nIntroduction: Thoracic surgeon.");
    }

    #[test]
    fn empty_profile_is_rejected() {
        let p = DoctorProfile::new("d9").with(ProfileField::Title, "   ");
        assert_eq!(
            serialize_profile(&p, &ProfileField::ALL, 10, &ReferenceTokenizer),
            Err(DomainError::AllFieldsEmpty("d9".into()))
        );
        let p = DoctorProfile::new("d9").with(ProfileField::Research, "x");
        assert!(matches!(
            serialize_profile(&p, &[ProfileField::Title], 10, &ReferenceTokenizer),
            Err(DomainError::AllFieldsEmpty(_))
        ));
        assert_eq!(
            serialize_profile(&p, &ProfileField::ALL, 0, &ReferenceTokenizer),
            Err(DomainError::ZeroBudget)
        );
    }

    #[test]
    fn long_profile_truncates_to_budget() {
        // 1500 words of 6 letters plus a space: 3 tokens each under the
        // reference tokenizer, so the untruncated text is well over 3000 tokens.
        let body = vec!["abcdef"; 1500].join(" ");
        let p = DoctorProfile::new("d").with(ProfileField::Introduction, body);
        let full = serialize_profile(&p, &ProfileField::ALL, usize::MAX, &ReferenceTokenizer).unwrap();
        assert!(ReferenceTokenizer.count(&full) >= 3000);
        let cut = serialize_profile(&p, &ProfileField::ALL, 2048, &ReferenceTokenizer).unwrap();
        assert_eq!(ReferenceTokenizer.count(&cut), 2048);
        assert!(full.starts_with(&cut));

        let cut = serialize_profile(&p, &ProfileField::ALL, 2048, &CharBudget).unwrap();
        assert_eq!(cut.chars().count(), 3 * 2048);
    }

    #[test]
    fn query_templates() {
        assert_eq!(
            render_query("lung cancer", "surgical treatment", None).unwrap(),
            "I want to find a doctor specializing in surgical treatment for lung cancer."
        );
        assert_eq!(
            render_query("lung cancer", "surgical treatment", Some("I am female.")).unwrap(),
            "I am female. I want to find a doctor specializing in surgical treatment for lung cancer."
        );
        assert_eq!(
            render_query("lung cancer", "", None),
            Err(DomainError::EmptyField("treatment"))
        );
        assert_eq!(
            render_query(" ", "surgery", None),
            Err(DomainError::EmptyField("disease"))
        );
    }

    #[test]
    fn query_deserializes_and_renders() {
        let q: MedicalQuery = serde_json::from_str(
            r#"{"query_id":"q1","disease":"lung cancer","treatment":"surgical treatment"}"#,
        )
        .unwrap();
        assert!(q.rendered_text().starts_with("I want"));
        let q2 = q.with_prefix(Some("I come from a rural area."));
        assert!(q2.rendered_text().starts_with("I come from a rural area. I want"));
        assert!(serde_json::from_str::<MedicalQuery>(
            r#"{"query_id":"q1","disease":"","treatment":"x"}"#
        )
        .is_err());
    }

    #[test]
    fn scheme_invariants() {
        let s = LabelScheme::default();
        assert_eq!(
            s.names().collect::<Vec<_>>(),
            ["Not Relevant", "Low", "Mid", "High", "Top"]
        );
        assert_eq!((s.min_score(), s.max_score()), (0.0, 4.0));
        assert!(LabelScheme::from_names(&["A"]).is_err());
        assert!(LabelScheme::from_names(&["A", "B", "C", "D", "E", "F"]).is_err());
        assert!(LabelScheme::from_names(&["A", "A"]).is_err());
        assert!(LabelScheme::new(vec![("A", 1.0), ("B", 1.0)]).is_err());
        for n in 2..=5 {
            let s = LabelScheme::with_levels(n).unwrap();
            assert_eq!(s.len(), n);
            assert_eq!(s.max_score(), (n - 1) as f64);
        }
        let parsed: LabelScheme = serde_json::from_str(
            r#"{"labels":[{"name":"No","score":0},{"name":"Yes","score":1}]}"#,
        )
        .unwrap();
        assert_eq!(parsed.len(), 2);
    }

    #[test]
    fn ranked_list_rejects_duplicates() {
        let c = |id: &str, s: f64| ScoredCandidate {
            doctor_id: id.into(),
            score: s,
            label_probs: vec![],
            predicted_label: String::new(),
        };
        assert!(RankedList::new("q", vec![c("a", 1.0), c("a", 2.0)]).is_err());
        let l = RankedList::new("q", vec![c("b", 1.0), c("c", 2.0), c("a", 1.0)]).unwrap();
        assert_eq!(l.doctor_ids(), ["c", "a", "b"]);
    }

    proptest! {
        #[test]
        fn no_prefix_means_no_self_description(d in "[a-z ]{1,20}[a-z]", t in "[a-z]{1,20}") {
            let q = render_query(&d, &t, None).unwrap();
            prop_assert!(q.starts_with("I want"));
            prop_assert!(!q.contains("I am "));
        }

        #[test]
        fn ranked_order_is_total(entries in proptest::collection::vec((0u8..4, "[a-e]{1,3}"), 0..30)) {
            let mut seen = HashSet::new();
            let cands: Vec<_> = entries
                .into_iter()
                .filter(|(_, id)| seen.insert(id.clone()))
                .map(|(s, id)| ScoredCandidate { doctor_id: id, score: s as f64, label_probs: vec![], predicted_label: String::new() })
                .collect();
            let mut reversed = cands.clone();
            reversed.reverse();
            let a = RankedList::new("q", cands).unwrap();
            let b = RankedList::new("q", reversed).unwrap();
            prop_assert_eq!(&a, &b);
            for w in a.entries().windows(2) {
                prop_assert_eq!(
                    rank_order(w[0].score, &w[0].doctor_id, w[1].score, &w[1].doctor_id),
                    Ordering::Less
                );
            }
        }
    }
}
