//! Canonical prompt templates and the parsers that read them back.
//!
//! Templates are versioned through [`TEMPLATE_VERSION`]; cached responses are
//! keyed by prompt bytes, so any wording change invalidates old cache entries
//! naturally. The parsers exist for the mock backends, which must recover the
//! query and candidate text from a prompt the same way a model would see it.

use std::borrow::Cow;
use std::fmt::Write as _;

use crate::domain::{LabelScheme, PairKey};

pub const TEMPLATE_VERSION: &str = "v1";

/// Appended verbatim to every ranking prompt; the next token is the label.
pub const ELICITATION_PREFIX: &str = "The professional relevance of the candidate doctor is ";

/// Appended after the predicted label when asking for a rationale.
pub const EXPLANATION_PREFIX: &str = ".\n\nThe reasons are as follows.\n1.";

const RANKING_INSTRUCTION: &str = "You are an experienced medical expert. Assess the professional relevance of a candidate doctor to a patient's specific medical need.";
const CRITERIA_HEADER: &str = "\n\nRanking criteria:\n";
const QUERY_MARKER: &str = "\n\nPatient need: ";
const PROFILE_MARKER: &str = "\n\nCandidate doctor profile:\n";

const CRITERIA_ROLE: &str = "You are a senior clinical expert who helps patients choose the right doctor. Write a set of ranking criteria for judging how professionally relevant a doctor is to patients with the following medical need.";
const CRITERIA_FORMAT: &str = "Requirements:\n1. Write the criteria as a numbered list, most important first.\n2. Cover clinical expertise in the treatment, experience with the disease, hospital and department standing, professional title, academic achievements and honours.\n3. Give each criterion a short name followed by a one-sentence description.\n4. Output only the criteria.";
pub const CRITERIA_END: &str = "\n\nRanking criteria:\n";

const PAIRWISE_HEAD: &str = "Given a patient's medical need, which of the following two doctors is more professionally relevant?";
const DOCTOR_A_MARKER: &str = "\n\nDoctor A:\n";
const DOCTOR_B_MARKER: &str = "\n\nDoctor B:\n";
pub const PAIRWISE_END: &str = "\n\nOutput \"Doctor A\" or \"Doctor B\":";

pub const LISTWISE_END: &str = "The output format should be [] > [], e.g., [2] > [1]. Only respond with the ranking results, do not explain.\n";

/// Joins profile lines so a passage fits on one line of a numbered list.
pub fn flatten(text: &str) -> Cow<'_, str> {
    if text.contains('\n') {
        Cow::Owned(text.replace('\n', " "))
    } else {
        Cow::Borrowed(text)
    }
}

fn label_list(scheme: &LabelScheme) -> String {
    let names: Vec<&str> = scheme.names().collect();
    names.iter().rev().copied().collect::<Vec<_>>().join(", ")
}

pub fn ranking_prompt(
    query_text: &str,
    profile_text: &str,
    scheme: &LabelScheme,
    criteria_text: Option<&str>,
) -> String {
    let mut p = String::with_capacity(profile_text.len() + 512);
    p.push_str(RANKING_INSTRUCTION);
    write!(
        p,
        " Answer with exactly one of the following graded labels, ordered from most to least relevant: {}.",
        label_list(scheme)
    )
    .unwrap();
    if let Some(c) = criteria_text {
        p.push_str(CRITERIA_HEADER);
        p.push_str(c);
    }
    p.push_str(QUERY_MARKER);
    p.push_str(query_text);
    p.push_str(PROFILE_MARKER);
    p.push_str(profile_text);
    p.push_str("\n\n");
    p.push_str(ELICITATION_PREFIX);
    p
}

/// The ranking prompt completed with `label`, followed by the explanation prefix.
pub fn rationale_prompt(ranking_prompt: &str, label: &str) -> String {
    format!("{ranking_prompt}{label}{EXPLANATION_PREFIX}")
}

/// Query and candidate text recovered from a ranking or rationale prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct RankingParts<'a> {
    pub query_text: &'a str,
    pub profile_text: &'a str,
    /// Present for rationale prompts.
    pub label: Option<&'a str>,
}

pub fn parse_ranking_prompt(prompt: &str) -> Option<RankingParts<'_>> {
    let (body, label) = if let Some(rest) = prompt.strip_suffix(EXPLANATION_PREFIX) {
        let cut = rest.rfind(ELICITATION_PREFIX)?;
        (&rest[..cut], Some(&rest[cut + ELICITATION_PREFIX.len()..]))
    } else {
        (prompt.strip_suffix(ELICITATION_PREFIX)?, None)
    };
    let body = body.strip_suffix("\n\n")?;
    let p = body.rfind(PROFILE_MARKER)?;
    let profile_text = &body[p + PROFILE_MARKER.len()..];
    let head = &body[..p];
    let q = head.rfind(QUERY_MARKER)?;
    Some(RankingParts {
        query_text: &head[q + QUERY_MARKER.len()..],
        profile_text,
        label,
    })
}

pub fn criteria_prompt(pair: &PairKey, draft: Option<(usize, usize)>) -> String {
    let mut p = String::from(CRITERIA_ROLE);
    write!(
        p,
        "\n\nDisease: {}\nTreatment: {}\n\n{}",
        pair.disease, pair.treatment, CRITERIA_FORMAT
    )
    .unwrap();
    if let Some((i, n)) = draft {
        write!(p, "\n\nThis is draft {} of {}; write it independently of other drafts.", i + 1, n).unwrap();
    }
    p.push_str(CRITERIA_END);
    p
}

pub fn criteria_oneshot_prompt(pair: &PairKey, example_pair: &PairKey, example_text: &str) -> String {
    let mut p = String::from(CRITERIA_ROLE);
    write!(
        p,
        "\n\nHere is an example of ranking criteria written for another medical need.\n\nExample disease: {}\nExample treatment: {}\nExample ranking criteria:\n{}\n\nNow write ranking criteria in the same format for the following medical need.\n\nDisease: {}\nTreatment: {}\n\n{}",
        example_pair.disease,
        example_pair.treatment,
        example_text,
        pair.disease,
        pair.treatment,
        CRITERIA_FORMAT
    )
    .unwrap();
    p.push_str(CRITERIA_END);
    p
}

pub fn parse_criteria_prompt(prompt: &str) -> Option<PairKey> {
    let body = prompt.strip_suffix(CRITERIA_END)?;
    let d = body.rfind("\nDisease: ")? + "\nDisease: ".len();
    let disease = body[d..].lines().next()?;
    let t = body.rfind("\nTreatment: ")? + "\nTreatment: ".len();
    let treatment = body[t..].lines().next()?;
    Some(PairKey::new(disease, treatment))
}

pub fn pairwise_prompt(query_text: &str, first: &str, second: &str) -> String {
    format!(
        "{PAIRWISE_HEAD}{QUERY_MARKER}{query_text}{DOCTOR_A_MARKER}{first}{DOCTOR_B_MARKER}{second}{PAIRWISE_END}"
    )
}

pub struct PairwiseParts<'a> {
    pub query_text: &'a str,
    pub first: &'a str,
    pub second: &'a str,
}

pub fn parse_pairwise_prompt(prompt: &str) -> Option<PairwiseParts<'_>> {
    let body = prompt.strip_suffix(PAIRWISE_END)?;
    let b = body.rfind(DOCTOR_B_MARKER)?;
    let second = &body[b + DOCTOR_B_MARKER.len()..];
    let head = &body[..b];
    let a = head.rfind(DOCTOR_A_MARKER)?;
    let first = &head[a + DOCTOR_A_MARKER.len()..];
    let head = &head[..a];
    let q = head.find(QUERY_MARKER)?;
    Some(PairwiseParts {
        query_text: &head[q + QUERY_MARKER.len()..],
        first,
        second,
    })
}

/// Which side a single pairwise generation preferred.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    First,
    Second,
    Unparsed,
}

pub fn parse_pair_verdict(text: &str) -> Verdict {
    let a = text.find("Doctor A");
    let b = text.find("Doctor B");
    match (a, b) {
        (Some(x), Some(y)) => return if x < y { Verdict::First } else { Verdict::Second },
        (Some(_), None) => return Verdict::First,
        (None, Some(_)) => return Verdict::Second,
        (None, None) => {}
    }
    let t = text.trim_start();
    let mut chars = t.chars();
    let head = chars.next();
    let next_is_letter = chars.next().is_some_and(|c| c.is_alphanumeric());
    match head {
        Some('A') if !next_is_letter => Verdict::First,
        Some('B') if !next_is_letter => Verdict::Second,
        _ => Verdict::Unparsed,
    }
}

pub fn listwise_prompt(query_text: &str, passages: &[String]) -> String {
    let n = passages.len();
    let mut p = format!(
        "I will provide you with {n} doctor profiles, each indicated by a numerical identifier []. Rank the doctors based on their professional relevance to the patient need: {query_text}\n\n"
    );
    for (i, passage) in passages.iter().enumerate() {
        writeln!(p, "[{}] {}", i + 1, flatten(passage)).unwrap();
    }
    write!(
        p,
        "\nPatient need: {query_text}\nRank the {n} doctors above based on their professional relevance to the patient need. List all doctors in descending order of relevance using their identifiers. "
    )
    .unwrap();
    p.push_str(LISTWISE_END);
    p
}

pub struct ListwiseParts<'a> {
    pub query_text: &'a str,
    pub passages: Vec<&'a str>,
}

pub fn parse_listwise_prompt(prompt: &str) -> Option<ListwiseParts<'_>> {
    let body = prompt.strip_suffix(LISTWISE_END)?;
    let tail = body.rfind("\nPatient need: ")?;
    let after = &body[tail + "\nPatient need: ".len()..];
    let query_text = after.split('\n').next()?;
    let head_end = body.find("\n\n")?;
    let list = &body[head_end + 2..tail];
    let mut passages = Vec::new();
    for (i, line) in list.lines().enumerate() {
        let marker = format!("[{}] ", i + 1);
        passages.push(line.strip_prefix(marker.as_str())?);
    }
    Some(ListwiseParts {
        query_text,
        passages,
    })
}

/// Reads a permutation of `0..n` from generated text.
///
/// Integers are taken in order of appearance (1-based in the text);
/// out-of-range and repeated indices are dropped, and indices that never
/// appear are appended in their original order. The result is always a
/// permutation.
pub fn parse_permutation(text: &str, n: usize) -> Vec<usize> {
    let mut seen = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut digits = String::new();
    let flush = |digits: &mut String, order: &mut Vec<usize>, seen: &mut Vec<bool>| {
        if digits.is_empty() {
            return;
        }
        if let Ok(v) = digits.parse::<usize>() {
            if (1..=n).contains(&v) && !seen[v - 1] {
                seen[v - 1] = true;
                order.push(v - 1);
            }
        }
        digits.clear();
    };
    for c in text.chars() {
        if c.is_ascii_digit() {
            digits.push(c);
        } else {
            flush(&mut digits, &mut order, &mut seen);
        }
    }
    flush(&mut digits, &mut order, &mut seen);
    order.extend((0..n).filter(|i| !seen[*i]));
    order
}

/// Formats a 0-based order as `[a] > [b] > ...`.
pub fn format_permutation(order: &[usize]) -> String {
    order
        .iter()
        .map(|i| format!("[{}]", i + 1))
        .collect::<Vec<_>>()
        .join(" > ")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ranking_prompt_shape() {
        let s = LabelScheme::default();
        let p = ranking_prompt("I want X.", "Title: A\nSpecialty: B", &s, Some("1. crit"));
        assert!(p.ends_with(ELICITATION_PREFIX));
        assert!(p.contains("Top, High, Mid, Low, Not Relevant"));
        let ci = p.find("1. crit").unwrap();
        let qi = p.find("I want X.").unwrap();
        let pi = p.find("Title: A").unwrap();
        assert!(ci < qi && qi < pi);
        let parts = parse_ranking_prompt(&p).unwrap();
        assert_eq!(parts.query_text, "I want X.");
        assert_eq!(parts.profile_text, "Title: A\nSpecialty: B");
        assert_eq!(parts.label, None);

        let r = rationale_prompt(&p, "High");
        assert!(r.ends_with(".\n\nThe reasons are as follows.\n1."));
        let parts = parse_ranking_prompt(&r).unwrap();
        assert_eq!(parts.label, Some("High"));
        assert_eq!(parts.profile_text, "Title: A\nSpecialty: B");
    }

    #[test]
    fn criteria_prompts_parse_back() {
        let pair = PairKey::new("lung cancer", "surgical treatment");
        let p = criteria_prompt(&pair, Some((1, 3)));
        assert!(p.contains("draft 2 of 3"));
        assert_eq!(parse_criteria_prompt(&p), Some(pair.clone()));
        let ex = PairKey::new("gastric cancer", "chemotherapy");
        let p = criteria_oneshot_prompt(&pair, &ex, "1. Disease: experience\n2. Treatment: x");
        assert_eq!(parse_criteria_prompt(&p), Some(pair));
    }

    #[test]
    fn pairwise_and_listwise_parse_back() {
        let p = pairwise_prompt("q?", "Title: a\nAwards: b", "Title: c");
        let parts = parse_pairwise_prompt(&p).unwrap();
        assert_eq!(
            (parts.query_text, parts.first, parts.second),
            ("q?", "Title: a\nAwards: b", "Title: c")
        );
        let passages = vec!["Title: a\nAwards: b".to_string(), "Title: c".to_string()];
        let p = listwise_prompt("q?", &passages);
        let parts = parse_listwise_prompt(&p).unwrap();
        assert_eq!(parts.query_text, "q?");
        assert_eq!(parts.passages, vec!["Title: a Awards: b", "Title: c"]);
    }

    #[test]
    fn verdicts() {
        assert_eq!(parse_pair_verdict("Doctor A"), Verdict::First);
        assert_eq!(parse_pair_verdict(" Doctor B is better"), Verdict::Second);
        assert_eq!(parse_pair_verdict("B"), Verdict::Second);
        assert_eq!(parse_pair_verdict("A."), Verdict::First);
        assert_eq!(parse_pair_verdict("Both"), Verdict::Unparsed);
        assert_eq!(parse_pair_verdict(""), Verdict::Unparsed);
    }

    #[test]
    fn permutation_repair() {
        assert_eq!(parse_permutation("[2] > [1] > [3]", 3), vec![1, 0, 2]);
        assert_eq!(parse_permutation("[3] > [3] > [9] > [0]", 4), vec![2, 0, 1, 3]);
        assert_eq!(parse_permutation("no idea", 3), vec![0, 1, 2]);
        assert_eq!(parse_permutation("", 0), Vec::<usize>::new());
        assert_eq!(format_permutation(&[1, 0]), "[2] > [1]");
    }

    proptest! {
        #[test]
        fn repaired_output_is_a_permutation(text in "[\\[\\]0-9> ,a-z]{0,120}", n in 0usize..30) {
            let mut p = parse_permutation(&text, n);
            p.sort_unstable();
            prop_assert_eq!(p, (0..n).collect::<Vec<_>>());
        }
    }
}
