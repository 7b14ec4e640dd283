//! Pointwise graded-label ranking.
//!
//! Each candidate is scored on its own: the ranking prompt ends with the
//! elicitation prefix, the backend's next-token confidences for the label
//! first tokens become the candidate's label logits, and a score is derived
//! from them by one of three strategies:
//!
//! - `SUM`: the expected label score, `sum_k softmax(logits)_k * s_k`;
//! - `MAX_logit`: the raw logit of the most relevant label;
//! - `MAX_prob`: the softmax probability of the most relevant label.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, Gateway, LabelLogits};
use crate::domain::{
    serialize_profile, DoctorProfile, DomainError, LabelScheme, MedicalQuery, ProfileField,
    RankedList, ScoredCandidate,
};
use crate::explain::CriteriaDocument;
use crate::prompts;

#[derive(Debug, Error)]
pub enum ScoringError {
    #[error("candidate {doctor_id}: {source}")]
    Backend {
        doctor_id: String,
        #[source]
        source: BackendError,
    },
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error("logits have {got} entries but the scheme has {expected} labels")]
    Misaligned { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum ScoreStrategy {
    #[default]
    #[serde(rename = "SUM")]
    Sum,
    #[serde(rename = "MAX_logit")]
    MaxLogit,
    #[serde(rename = "MAX_prob")]
    MaxProb,
}

impl fmt::Display for ScoreStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScoreStrategy::Sum => "SUM",
            ScoreStrategy::MaxLogit => "MAX_logit",
            ScoreStrategy::MaxProb => "MAX_prob",
        })
    }
}

impl FromStr for ScoreStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "SUM" | "sum" => Ok(ScoreStrategy::Sum),
            "MAX_logit" | "max_logit" => Ok(ScoreStrategy::MaxLogit),
            "MAX_prob" | "max_prob" => Ok(ScoreStrategy::MaxProb),
            other => Err(format!("unknown score strategy `{other}`")),
        }
    }
}

/// Unnormalized softmax weights `exp(logit_k - max)`; the largest is exactly 1.
fn softmax_weights(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    logits.iter().map(|v| (v - max).exp()).collect()
}

/// Softmax over label logits, computed with max subtraction.
pub fn label_probabilities(logits: &[f64]) -> Vec<f64> {
    let w = softmax_weights(logits);
    let z: f64 = w.iter().sum();
    w.iter().map(|v| v / z).collect()
}

/// Scores one candidate's logits. `SUM` is evaluated as
/// `sum(w_k * s_k) / sum(w_k)` on the unnormalized weights, which is exact
/// for uniform logits and clamped to the scheme's score range.
pub fn derive_score(
    logits: &LabelLogits,
    scheme: &LabelScheme,
    strategy: ScoreStrategy,
) -> Result<f64, ScoringError> {
    let values = logits.values();
    if values.len() != scheme.len() {
        return Err(ScoringError::Misaligned {
            expected: scheme.len(),
            got: values.len(),
        });
    }
    let top = values.len() - 1;
    Ok(match strategy {
        ScoreStrategy::Sum => {
            let w = softmax_weights(values);
            let z: f64 = w.iter().sum();
            let num: f64 = w
                .iter()
                .zip(scheme.labels())
                .map(|(w, l)| w * l.score)
                .sum();
            (num / z).clamp(scheme.min_score(), scheme.max_score())
        }
        ScoreStrategy::MaxLogit => values[top],
        ScoreStrategy::MaxProb => {
            let w = softmax_weights(values);
            w[top] / w.iter().sum::<f64>()
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingPrompt {
    pub text: String,
    pub query_id: String,
    pub doctor_id: String,
    pub criteria_id: Option<String>,
}

pub fn assemble_ranking_prompt(
    query: &MedicalQuery,
    doctor_id: &str,
    profile_text: &str,
    scheme: &LabelScheme,
    criteria: Option<&CriteriaDocument>,
) -> Result<RankingPrompt, DomainError> {
    if profile_text.trim().is_empty() {
        return Err(DomainError::AllFieldsEmpty(doctor_id.to_string()));
    }
    Ok(RankingPrompt {
        text: prompts::ranking_prompt(
            query.rendered_text(),
            profile_text,
            scheme,
            criteria.map(|c| c.text.as_str()),
        ),
        query_id: query.query_id.clone(),
        doctor_id: doctor_id.to_string(),
        criteria_id: criteria.map(|c| c.criteria_id.clone()),
    })
}

/// What to do when a candidate's backend request fails.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailurePolicy {
    #[default]
    AbortQuery,
    ExcludeCandidate,
}

#[derive(Debug, Clone)]
pub struct PointwiseOptions {
    pub scheme: LabelScheme,
    pub strategy: ScoreStrategy,
    pub field_order: Vec<ProfileField>,
    pub profile_budget: usize,
    pub failure_policy: FailurePolicy,
}

impl Default for PointwiseOptions {
    fn default() -> Self {
        PointwiseOptions {
            scheme: LabelScheme::default(),
            strategy: ScoreStrategy::Sum,
            field_order: ProfileField::ALL.to_vec(),
            profile_budget: 2048,
            failure_policy: FailurePolicy::AbortQuery,
        }
    }
}

/// Everything computed for one candidate; serialized as the logit sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateDetail {
    pub query_id: String,
    pub doctor_id: String,
    pub logits: LabelLogits,
    pub label_probs: Vec<f64>,
    pub score: f64,
    pub predicted_label: String,
    pub criteria_id: Option<String>,
}

#[derive(Debug, Clone)]
pub struct PointwiseOutcome {
    pub list: RankedList,
    /// In rank order.
    pub details: Vec<CandidateDetail>,
    /// Candidates dropped under [`FailurePolicy::ExcludeCandidate`].
    pub failures: Vec<(String, BackendError)>,
}

fn score_candidate(
    gateway: &Gateway,
    query: &MedicalQuery,
    profile: &DoctorProfile,
    opts: &PointwiseOptions,
    criteria: Option<&CriteriaDocument>,
) -> Result<CandidateDetail, ScoringError> {
    let tokenizer = gateway.tokenizer();
    let text = serialize_profile(profile, &opts.field_order, opts.profile_budget, tokenizer.as_ref())?;
    let prompt = assemble_ranking_prompt(query, &profile.doctor_id, &text, &opts.scheme, criteria)?;
    let logits = gateway
        .fetch_label_logits(&prompt.text, &opts.scheme)
        .map_err(|source| ScoringError::Backend {
            doctor_id: profile.doctor_id.clone(),
            source,
        })?;
    let score = derive_score(&logits, &opts.scheme, opts.strategy)?;
    Ok(CandidateDetail {
        query_id: query.query_id.clone(),
        doctor_id: profile.doctor_id.clone(),
        label_probs: label_probabilities(logits.values()),
        predicted_label: opts.scheme.labels()[logits.argmax()].name.clone(),
        logits,
        score,
        criteria_id: prompt.criteria_id,
    })
}

/// Scores every candidate independently (concurrently, within the
/// gateway's in-flight bound) and sorts once all answers are in.
pub fn rank_pointwise(
    gateway: &Gateway,
    query: &MedicalQuery,
    candidates: &[DoctorProfile],
    opts: &PointwiseOptions,
    criteria: Option<&CriteriaDocument>,
) -> Result<PointwiseOutcome, ScoringError> {
    let n = candidates.len();
    let slots: Vec<Mutex<Option<Result<CandidateDetail, ScoringError>>>> =
        (0..n).map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let abort = AtomicBool::new(false);
    let work = || loop {
        if abort.load(Ordering::SeqCst) {
            break;
        }
        let i = next.fetch_add(1, Ordering::SeqCst);
        if i >= n {
            break;
        }
        let r = score_candidate(gateway, query, &candidates[i], opts, criteria);
        if r.is_err() && opts.failure_policy == FailurePolicy::AbortQuery {
            abort.store(true, Ordering::SeqCst);
        }
        *slots[i].lock().unwrap() = Some(r);
    };
    let workers = gateway.max_in_flight().clamp(1, n.max(1));
    if workers == 1 {
        work();
    } else {
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(work);
            }
        });
    }

    let mut details = Vec::with_capacity(n);
    let mut failures = Vec::new();
    for slot in slots {
        match slot.into_inner().unwrap() {
            Some(Ok(d)) => details.push(d),
            Some(Err(ScoringError::Backend { doctor_id, source }))
                if opts.failure_policy == FailurePolicy::ExcludeCandidate =>
            {
                log::warn!("query {}: excluding {doctor_id}: {source}", query.query_id);
                failures.push((doctor_id, source));
            }
            Some(Err(e)) => return Err(e),
            // Skipped after an abort; the failing slot is reported instead.
            None => {}
        }
    }
    let list = RankedList::new(
        query.query_id.clone(),
        details
            .iter()
            .map(|d| ScoredCandidate {
                doctor_id: d.doctor_id.clone(),
                score: d.score,
                label_probs: d.label_probs.clone(),
                predicted_label: d.predicted_label.clone(),
            })
            .collect(),
    )?;
    let order: std::collections::HashMap<&str, usize> = list
        .entries()
        .iter()
        .enumerate()
        .map(|(i, e)| (e.doctor_id.as_str(), i))
        .collect();
    details.sort_by_key(|d| order[d.doctor_id.as_str()]);
    Ok(PointwiseOutcome {
        list,
        details,
        failures,
    })
}
