use std::collections::{HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::domain::MAX_RELEVANCE;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Warning,
    Error,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FindingKind {
    DanglingDoctor,
    DanglingQuery,
    DuplicateJudgment,
    ConflictingJudgment,
    RelevanceOutOfRange,
    EmptyProfile,
    DuplicateDoctor,
    DuplicateQuery,
    UnjudgedQuery,
}

impl FindingKind {
    pub fn severity(self) -> Severity {
        match self {
            FindingKind::DuplicateJudgment | FindingKind::UnjudgedQuery => Severity::Warning,
            _ => Severity::Error,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Finding {
    pub severity: Severity,
    pub kind: FindingKind,
    pub message: String,
}

impl fmt::Display for Finding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let level = match self.severity {
            Severity::Warning => "warning",
            Severity::Error => "error",
        };
        write!(f, "{level}: {}", self.message)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValidationStatus {
    Clean,
    Warnings,
    Errors,
}

impl ValidationStatus {
    /// Process exit code: 0 clean, 3 warnings only, 4 errors.
    pub fn exit_code(self) -> i32 {
        match self {
            ValidationStatus::Clean => 0,
            ValidationStatus::Warnings => 3,
            ValidationStatus::Errors => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub doctors: usize,
    pub queries: usize,
    pub judgments: usize,
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    pub fn status(&self) -> ValidationStatus {
        match self.findings.iter().map(|f| f.severity).max() {
            None => ValidationStatus::Clean,
            Some(Severity::Warning) => ValidationStatus::Warnings,
            Some(Severity::Error) => ValidationStatus::Errors,
        }
    }

    pub fn count(&self, kind: FindingKind) -> usize {
        self.findings.iter().filter(|f| f.kind == kind).count()
    }
}

/// Cross-file consistency checks. Findings come out in a fixed order:
/// corpus, queries, then qrels in file order.
pub fn validate_dataset(data: &Dataset) -> ValidationReport {
    let mut findings = Vec::new();
    let mut push = |kind: FindingKind, message: String| {
        findings.push(Finding {
            severity: kind.severity(),
            kind,
            message,
        })
    };

    let mut doctors = HashSet::new();
    for p in &data.corpus {
        if !doctors.insert(p.doctor_id.as_str()) {
            push(FindingKind::DuplicateDoctor, format!("doctor {} appears more than once in the corpus", p.doctor_id));
        }
        if p.is_empty() {
            push(FindingKind::EmptyProfile, format!("doctor {} has no non-empty profile field", p.doctor_id));
        }
    }
    let mut queries = HashSet::new();
    for q in &data.queries {
        if !queries.insert(q.query_id.as_str()) {
            push(FindingKind::DuplicateQuery, format!("query {} appears more than once", q.query_id));
        }
    }

    let mut judged: HashMap<(&str, &str), i32> = HashMap::new();
    for j in &data.qrels {
        if !queries.contains(j.query_id.as_str()) {
            push(FindingKind::DanglingQuery, format!("qrels reference unknown query {}", j.query_id));
        }
        if !doctors.contains(j.doctor_id.as_str()) {
            push(
                FindingKind::DanglingDoctor,
                format!("qrels for {} reference unknown doctor {}", j.query_id, j.doctor_id),
            );
        }
        if !(0..=MAX_RELEVANCE).contains(&j.relevance) {
            push(
                FindingKind::RelevanceOutOfRange,
                format!(
                    "relevance {} for ({}, {}) outside 0..={MAX_RELEVANCE}",
                    j.relevance, j.query_id, j.doctor_id
                ),
            );
        }
        match judged.insert((&j.query_id, &j.doctor_id), j.relevance) {
            Some(prev) if prev == j.relevance => push(
                FindingKind::DuplicateJudgment,
                format!("({}, {}) judged twice", j.query_id, j.doctor_id),
            ),
            Some(prev) => push(
                FindingKind::ConflictingJudgment,
                format!("({}, {}) judged {prev} and {}", j.query_id, j.doctor_id, j.relevance),
            ),
            None => {}
        }
    }
    let with_judgments: HashSet<&str> = judged.keys().map(|(q, _)| *q).collect();
    for q in &data.queries {
        if !with_judgments.contains(q.query_id.as_str()) {
            push(FindingKind::UnjudgedQuery, format!("query {} has no judgments", q.query_id));
        }
    }

    ValidationReport {
        doctors: data.corpus.len(),
        queries: data.queries.len(),
        judgments: data.qrels.len(),
        findings,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{DoctorProfile, GradedJudgment, MedicalQuery, ProfileField};

    fn base() -> Dataset {
        Dataset {
            corpus: vec![
                DoctorProfile::new("d1").with(ProfileField::Title, "Chief Physician"),
                DoctorProfile::new("d2").with(ProfileField::Expertise, "lung surgery"),
            ],
            queries: vec![MedicalQuery::new("q1", "lung cancer", "surgery", None).unwrap()],
            qrels: vec![judgment("q1", "d1", 3), judgment("q1", "d2", 0)],
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
    fn consistent_data_is_clean() {
        let r = validate_dataset(&base());
        assert!(r.findings.is_empty());
        assert_eq!(r.status().exit_code(), 0);
    }

    #[test]
    fn dangling_and_out_of_range() {
        let mut d = base();
        d.qrels.push(judgment("q1", "ghost", 1));
        let r = validate_dataset(&d);
        assert_eq!(r.findings.len(), 1);
        assert_eq!(r.findings[0].kind, FindingKind::DanglingDoctor);
        assert!(r.findings[0].message.contains("ghost"));

        let mut d = base();
        d.qrels[0].relevance = 7;
        let r = validate_dataset(&d);
        assert_eq!(r.count(FindingKind::RelevanceOutOfRange), 1);
        assert_eq!(r.findings.len(), 1);
        assert_eq!(r.status(), ValidationStatus::Errors);
    }

    #[test]
    fn warnings_and_other_errors() {
        let mut d = base();
        d.qrels.push(judgment("q1", "d1", 3));
        d.queries.push(MedicalQuery::new("q2", "gastric cancer", "chemotherapy", None).unwrap());
        let r = validate_dataset(&d);
        assert_eq!(r.count(FindingKind::DuplicateJudgment), 1);
        assert_eq!(r.count(FindingKind::UnjudgedQuery), 1);
        assert_eq!(r.status().exit_code(), 3);

        d.qrels.push(judgment("q1", "d1", 1));
        d.qrels.push(judgment("q9", "d1", 1));
        d.corpus.push(DoctorProfile::new("d3"));
        d.corpus.push(DoctorProfile::new("d1").with(ProfileField::Title, "x"));
        let r = validate_dataset(&d);
        for k in [
            FindingKind::ConflictingJudgment,
            FindingKind::DanglingQuery,
            FindingKind::EmptyProfile,
            FindingKind::DuplicateDoctor,
        ] {
            assert_eq!(r.count(k), 1, "{k:?}");
        }
        assert_eq!(r.status().exit_code(), 4);
    }
}
