//! Pairwise (heapsort) and listwise (sliding window) ranking.
//!
//! Neither strategy yields a calibrated score, so both emit synthetic
//! `N - position` scores. Work within one query is sequential because every
//! comparison or window depends on the state left by the previous one.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, Gateway};
use crate::domain::{serialize_profile, DoctorProfile, DomainError, MedicalQuery, ProfileField, RankedList};
use crate::prompts::{self, Verdict};

#[derive(Debug, Error)]
pub enum ComparisonError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error("invalid window plan: window {window_size}, step {step_size}")]
    InvalidPlan { window_size: usize, step_size: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preference {
    FirstBetter,
    SecondBetter,
    Tie,
}

/// The combined answer plus the verdicts of the two single-order requests.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairPreference {
    pub preference: Preference,
    /// Verdict when asked in (A, B) order.
    pub forward: Verdict,
    /// Verdict when asked in (B, A) order.
    pub reverse: Verdict,
}

/// Tokens allowed for a pairwise verdict.
const PAIRWISE_MAX_TOKENS: usize = 8;

/// Asks for (A, B) and then (B, A). Only answers that agree across both
/// orders count; anything else is a tie.
pub fn pairwise_compare(
    gateway: &Gateway,
    query_text: &str,
    text_a: &str,
    text_b: &str,
) -> Result<PairPreference, BackendError> {
    let forward = gateway.generate_text(&prompts::pairwise_prompt(query_text, text_a, text_b), PAIRWISE_MAX_TOKENS)?;
    let reverse = gateway.generate_text(&prompts::pairwise_prompt(query_text, text_b, text_a), PAIRWISE_MAX_TOKENS)?;
    let forward = prompts::parse_pair_verdict(&forward.text);
    let reverse = prompts::parse_pair_verdict(&reverse.text);
    let preference = match (forward, reverse) {
        (Verdict::First, Verdict::Second) => Preference::FirstBetter,
        (Verdict::Second, Verdict::First) => Preference::SecondBetter,
        _ => Preference::Tie,
    };
    Ok(PairPreference {
        preference,
        forward,
        reverse,
    })
}

/// In-place ascending heapsort with a fallible comparator. Returns the
/// number of comparator invocations.
pub fn heapsort_by<T, E>(
    items: &mut [T],
    mut cmp: impl FnMut(&T, &T) -> Result<Ordering, E>,
) -> Result<usize, E> {
    let mut calls = 0usize;
    let mut less = |a: &T, b: &T| -> Result<bool, E> {
        calls += 1;
        Ok(cmp(a, b)? == Ordering::Less)
    };
    let n = items.len();

    fn sift_down<T, E>(
        items: &mut [T],
        mut root: usize,
        end: usize,
        less: &mut impl FnMut(&T, &T) -> Result<bool, E>,
    ) -> Result<(), E> {
        loop {
            let mut child = 2 * root + 1;
            if child >= end {
                return Ok(());
            }
            if child + 1 < end && less(&items[child], &items[child + 1])? {
                child += 1;
            }
            if !less(&items[root], &items[child])? {
                return Ok(());
            }
            items.swap(root, child);
            root = child;
        }
    }

    for start in (0..n / 2).rev() {
        sift_down(items, start, n, &mut less)?;
    }
    for end in (1..n).rev() {
        items.swap(0, end);
        sift_down(items, 0, end, &mut less)?;
    }
    Ok(calls)
}

#[derive(Debug, Clone)]
pub struct ComparisonOptions {
    pub field_order: Vec<ProfileField>,
    pub profile_budget: usize,
}

impl Default for ComparisonOptions {
    fn default() -> Self {
        ComparisonOptions {
            field_order: ProfileField::ALL.to_vec(),
            profile_budget: 2048,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ComparisonOutcome {
    pub list: RankedList,
    /// Pairwise comparisons made, or listwise windows issued.
    pub steps: usize,
}

fn serialized(
    gateway: &Gateway,
    candidates: &[DoctorProfile],
    opts: &ComparisonOptions,
) -> Result<Vec<String>, DomainError> {
    let tokenizer = gateway.tokenizer();
    candidates
        .iter()
        .map(|p| serialize_profile(p, &opts.field_order, opts.profile_budget, tokenizer.as_ref()))
        .collect()
}

/// Heapsort with [`pairwise_compare`] as the comparator. Ties fall back to
/// ascending doctor_id, which keeps the comparator total.
pub fn rank_pairwise_heapsort(
    gateway: &Gateway,
    query: &MedicalQuery,
    candidates: &[DoctorProfile],
    opts: &ComparisonOptions,
) -> Result<ComparisonOutcome, ComparisonError> {
    let texts = serialized(gateway, candidates, opts)?;
    let mut idx: Vec<usize> = (0..candidates.len()).collect();
    // Ascending relevance; reversed below.
    let steps = heapsort_by(&mut idx, |&a, &b| -> Result<Ordering, BackendError> {
        let pref = pairwise_compare(gateway, query.rendered_text(), &texts[a], &texts[b])?;
        Ok(match pref.preference {
            Preference::FirstBetter => Ordering::Greater,
            Preference::SecondBetter => Ordering::Less,
            Preference::Tie => candidates[b].doctor_id.cmp(&candidates[a].doctor_id),
        })
    })?;
    idx.reverse();
    let order = idx.into_iter().map(|i| candidates[i].doctor_id.clone()).collect();
    Ok(ComparisonOutcome {
        list: RankedList::from_order(query.query_id.clone(), order)?,
        steps,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowPlan {
    pub window_size: usize,
    pub step_size: usize,
}

impl Default for WindowPlan {
    fn default() -> Self {
        WindowPlan {
            window_size: 20,
            step_size: 10,
        }
    }
}

impl WindowPlan {
    pub fn new(window_size: usize, step_size: usize) -> Result<Self, ComparisonError> {
        if step_size == 0 || step_size > window_size {
            return Err(ComparisonError::InvalidPlan {
                window_size,
                step_size,
            });
        }
        Ok(WindowPlan {
            window_size,
            step_size,
        })
    }

    /// Half-open `[start, end)` spans for one back-to-front pass over `n` items.
    pub fn spans(&self, n: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        if n == 0 {
            return out;
        }
        let mut end = n;
        loop {
            let start = end.saturating_sub(self.window_size);
            out.push((start, end));
            if start == 0 {
                return out;
            }
            end -= self.step_size;
        }
    }
}

impl fmt::Display for WindowPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "listwise-w{}-s{}", self.window_size, self.step_size)
    }
}

/// Sliding-window permutation, `passes` times over the list (default one).
pub fn rank_listwise_sliding(
    gateway: &Gateway,
    query: &MedicalQuery,
    candidates: &[DoctorProfile],
    plan: WindowPlan,
    passes: usize,
    opts: &ComparisonOptions,
) -> Result<ComparisonOutcome, ComparisonError> {
    let plan = WindowPlan::new(plan.window_size, plan.step_size)?;
    let texts = serialized(gateway, candidates, opts)?;
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    let mut steps = 0;
    for _ in 0..passes {
        for (start, end) in plan.spans(order.len()) {
            let window = &mut order[start..end];
            let passages: Vec<String> = window.iter().map(|&i| texts[i].clone()).collect();
            let prompt = prompts::listwise_prompt(query.rendered_text(), &passages);
            // "[20] > " is at most 7 tokens under any sane tokenizer.
            let out = gateway.generate_text(&prompt, 8 * window.len())?;
            let perm = prompts::parse_permutation(&out.text, window.len());
            let before = window.to_vec();
            for (slot, &p) in window.iter_mut().zip(&perm) {
                *slot = before[p];
            }
            steps += 1;
        }
    }
    let ids = order.into_iter().map(|i| candidates[i].doctor_id.clone()).collect();
    Ok(ComparisonOutcome {
        list: RankedList::from_order(query.query_id.clone(), ids)?,
        steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{NoiseBackend, OracleBackend, OracleJudgment, TieMode};
    use crate::tokenizer::ReferenceTokenizer;
    use proptest::prelude::*;
    use std::sync::Arc;

    fn profiles(n: usize) -> Vec<DoctorProfile> {
        (0..n)
            .map(|i| {
                DoctorProfile::new(format!("d{i:03}"))
                    .with(ProfileField::Title, format!("Attending physician {i}"))
                    .with(ProfileField::Expertise, format!("case series {i}"))
            })
            .collect()
    }

    fn oracle(q: &MedicalQuery, docs: &[DoctorProfile], grades: &[i32], tie: TieMode) -> Gateway {
        let judgments = docs.iter().zip(grades).map(|(d, &g)| OracleJudgment {
            query_text: q.rendered_text().to_string(),
            profile_text: serialize_profile(d, &ProfileField::ALL, 2048, &ReferenceTokenizer).unwrap(),
            grade: g,
        });
        Gateway::new(Arc::new(OracleBackend::new("o", judgments).with_tie_mode(tie)), 1, 20)
    }

    fn query() -> MedicalQuery {
        MedicalQuery::new("q1", "lung cancer", "surgical treatment", None).unwrap()
    }

    #[test]
    fn compare_asks_both_orders() {
        let q = query();
        let docs = profiles(3);
        let gw = oracle(&q, &docs, &[5, 1, 1], TieMode::Positional);
        let texts = serialized(&gw, &docs, &ComparisonOptions::default()).unwrap();
        let p = pairwise_compare(&gw, q.rendered_text(), &texts[0], &texts[1]).unwrap();
        assert_eq!(p.preference, Preference::FirstBetter);
        assert_eq!((p.forward, p.reverse), (Verdict::First, Verdict::Second));
        assert_eq!(gw.stats().generate_calls, 2);
        let swapped = pairwise_compare(&gw, q.rendered_text(), &texts[1], &texts[0]).unwrap();
        assert_eq!(swapped.preference, Preference::SecondBetter);
        let tie = pairwise_compare(&gw, q.rendered_text(), &texts[1], &texts[2]).unwrap();
        assert_eq!(tie.preference, Preference::Tie);
        assert_eq!((tie.forward, tie.reverse), (Verdict::First, Verdict::First));
    }

    #[test]
    fn heapsort_single_and_ties() {
        let q = query();
        let docs = profiles(1);
        let gw = oracle(&q, &docs, &[3], TieMode::Abstain);
        let out = rank_pairwise_heapsort(&gw, &q, &docs, &ComparisonOptions::default()).unwrap();
        assert_eq!(out.steps, 0);
        assert_eq!(out.list.doctor_ids(), vec!["d000"]);

        let docs = profiles(5);
        let gw = oracle(&q, &docs, &[1, 4, 1, 4, 0], TieMode::Abstain);
        let out = rank_pairwise_heapsort(&gw, &q, &docs, &ComparisonOptions::default()).unwrap();
        assert_eq!(out.list.doctor_ids(), vec!["d001", "d003", "d000", "d002", "d004"]);
        let scores: Vec<f64> = out.list.entries().iter().map(|e| e.score).collect();
        assert_eq!(scores, vec![5.0, 4.0, 3.0, 2.0, 1.0]);
    }

    proptest! {
        #[test]
        fn heapsort_matches_std_sort(mut v in proptest::collection::vec(-50i32..50, 0..40)) {
            let mut expected = v.clone();
            expected.sort();
            let calls = heapsort_by(&mut v, |a, b| Ok::<_, ()>(a.cmp(b))).unwrap();
            prop_assert_eq!(&v, &expected);
            let n = v.len() as f64;
            prop_assert!(v.len() < 2 || (calls as f64) <= 3.0 * n * n.log2());
        }
    }

    #[test]
    fn window_spans() {
        let plan = WindowPlan::default();
        assert_eq!(plan.spans(20), vec![(0, 20)]);
        assert_eq!(plan.spans(7), vec![(0, 7)]);
        assert_eq!(plan.spans(100).len(), 9);
        assert_eq!(plan.spans(100)[0], (80, 100));
        assert_eq!(*plan.spans(100).last().unwrap(), (0, 20));
        assert_eq!(plan.spans(25), vec![(5, 25), (0, 15)]);
        assert!(plan.spans(0).is_empty());
        assert!(WindowPlan::new(10, 0).is_err());
        assert!(WindowPlan::new(10, 11).is_err());
        assert_eq!(plan.to_string(), "listwise-w20-s10");
    }

    #[test]
    fn listwise_brings_top_forward() {
        let q = query();
        let docs = profiles(30);
        // Best documents sit at the tail.
        let grades: Vec<i32> = (0..30).map(|i| if i >= 25 { 5 } else { i % 3 }).collect();
        let gw = oracle(&q, &docs, &grades, TieMode::Positional);
        let out = rank_listwise_sliding(&gw, &q, &docs, WindowPlan::default(), 1, &ComparisonOptions::default()).unwrap();
        assert_eq!(out.steps, 2);
        assert_eq!(gw.stats().generate_calls, 2);
        let top: Vec<&str> = out.list.doctor_ids()[..5].to_vec();
        assert_eq!(top, vec!["d025", "d026", "d027", "d028", "d029"]);
    }

    #[test]
    fn disjoint_windows_keep_items_in_place() {
        let q = query();
        let docs = profiles(23);
        let gw = Gateway::new(Arc::new(NoiseBackend::new(11, "n")), 1, 20);
        let plan = WindowPlan::new(5, 5).unwrap();
        let out = rank_listwise_sliding(&gw, &q, &docs, plan, 1, &ComparisonOptions::default()).unwrap();
        let ids = out.list.doctor_ids();
        for (start, end) in plan.spans(23) {
            let mut got: Vec<&str> = ids[start..end].to_vec();
            got.sort();
            let want: Vec<&str> = docs[start..end].iter().map(|d| d.doctor_id.as_str()).collect();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn malformed_output_is_repaired() {
        let q = query();
        let docs = profiles(45);
        for seed in 0..20 {
            let gw = Gateway::new(Arc::new(NoiseBackend::new(seed, "n")), 1, 20);
            let out = rank_listwise_sliding(&gw, &q, &docs, WindowPlan::default(), 2, &ComparisonOptions::default()).unwrap();
            let mut ids: Vec<&str> = out.list.doctor_ids();
            ids.sort();
            let want: Vec<&str> = docs.iter().map(|d| d.doctor_id.as_str()).collect();
            assert_eq!(ids, want);
            assert_eq!(out.steps, 8);
        }
    }
}
