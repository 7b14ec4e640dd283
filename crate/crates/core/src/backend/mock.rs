//! Deterministic offline backends.
//!
//! - [`OracleBackend`] knows the hidden grade of every (query, candidate)
//!   pair and answers every prompt kind consistently with it.
//! - [`NoiseBackend`] derives everything from a hash of its seed and the
//!   prompt, so any change to a prompt changes the answer.
//! - [`ReplayBackend`] serves responses recorded in a cache directory.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::cache::{request_key, RequestKind, ResponseCache};
use super::{
    generate_params, logprob_params, Backend, BackendError, FinishReason, GenerateRequest,
    GenerationResult, LogprobRequest, TokenLogprob,
};
use crate::domain::MAX_RELEVANCE;
use crate::prompts::{
    flatten, format_permutation, parse_criteria_prompt, parse_listwise_prompt,
    parse_pairwise_prompt, parse_ranking_prompt, CRITERIA_END, LISTWISE_END, PAIRWISE_END,
};
use crate::tokenizer::{ReferenceTokenizer, Tokenizer};

/// Cuts `text` to `max_new_tokens` reference tokens and sets the finish reason.
fn budgeted(text: String, max_new_tokens: usize) -> GenerationResult {
    let t = ReferenceTokenizer;
    if t.count(&text) > max_new_tokens {
        GenerationResult {
            text: t.truncate(&text, max_new_tokens).to_string(),
            finish_reason: FinishReason::Length,
        }
    } else {
        GenerationResult {
            text,
            finish_reason: FinishReason::Stop,
        }
    }
}

/// A hidden grade for one (query, candidate) pair.
///
/// `query_text` is the query rendered without any sensitive prefix;
/// `profile_text` is the candidate text exactly as it appears in prompts.
#[derive(Debug, Clone)]
pub struct OracleJudgment {
    pub query_text: String,
    pub profile_text: String,
    pub grade: i32,
}

/// How the oracle answers a pairwise prompt whose two candidates share a grade.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TieMode {
    /// Always prefer whichever doctor is shown first.
    #[default]
    Positional,
    /// Answer with text that names neither doctor.
    Abstain,
}

/// Backend that plants known grades.
///
/// Label logits are `-sharpness * (k - p)^2` (as log-probabilities), where
/// `p = grade * (L - 1) / max_grade` places the grade on the label axis. The
/// argmax is the label nearest to `p`, and the expected label score rises
/// strictly with the grade, so expectation scoring reproduces the grade order.
/// With grades 0 to 5 the gap between the best and second-best label is at
/// least `0.2 * sharpness` = 5.
pub struct OracleBackend {
    model_id: String,
    queries: HashMap<String, HashMap<String, i32>>,
    max_grade: i32,
    sharpness: f64,
    tie_mode: TieMode,
}

impl OracleBackend {
    pub const SHARPNESS: f64 = 25.0;

    pub fn new(model_id: impl Into<String>, judgments: impl IntoIterator<Item = OracleJudgment>) -> Self {
        let mut queries: HashMap<String, HashMap<String, i32>> = HashMap::new();
        let mut max_grade = MAX_RELEVANCE;
        for j in judgments {
            max_grade = max_grade.max(j.grade);
            queries
                .entry(j.query_text)
                .or_default()
                .insert(flatten(&j.profile_text).into_owned(), j.grade);
        }
        OracleBackend {
            model_id: model_id.into(),
            queries,
            max_grade,
            sharpness: Self::SHARPNESS,
            tie_mode: TieMode::Positional,
        }
    }

    pub fn with_tie_mode(mut self, mode: TieMode) -> Self {
        self.tie_mode = mode;
        self
    }

    /// Grade of a candidate; unjudged candidates count as grade 0. A query
    /// preceded by a sensitive prefix resolves to the same judgments.
    pub fn grade(&self, query_text: &str, profile_text: &str) -> i32 {
        let judged = self.queries.get(query_text).or_else(|| {
            self.queries.iter().find_map(|(q, m)| {
                let head = query_text.strip_suffix(q.as_str())?;
                head.ends_with(' ').then_some(m)
            })
        });
        judged
            .and_then(|m| m.get(flatten(profile_text).as_ref()).copied())
            .unwrap_or(0)
    }

    pub fn label_logprobs(&self, grade: i32, n_labels: usize) -> Vec<f64> {
        let top = (n_labels - 1) as f64;
        let p = (grade.max(0) as f64 * top / self.max_grade as f64).clamp(0.0, top);
        let raw: Vec<f64> = (0..n_labels)
            .map(|k| -self.sharpness * (k as f64 - p).powi(2))
            .collect();
        let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + raw.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        raw.iter().map(|v| v - lse).collect()
    }

    fn answer(&self, prompt: &str) -> Result<String, BackendError> {
        if let Some(parts) = parse_ranking_prompt(prompt) {
            if let Some(label) = parts.label {
                return Ok(format!(
                    " The profile shows {label} professional relevance to this need.\n2. The stated label {label} follows from the candidate's clinical focus and experience."
                ));
            }
        }
        if prompt.ends_with(CRITERIA_END) {
            let pair = parse_criteria_prompt(prompt)
                .ok_or_else(|| BackendError::Protocol("unparseable criteria prompt".into()))?;
            return Ok(format!(
                "1. Treatment expertise: hands-on experience delivering {t} for {d}.\n2. Disease focus: a clinical practice centred on {d}.\n3. Institutional standing: a leading hospital and department for {d}.\n4. Professional title: seniority of the doctor's clinical title.\n5. Academic record: research and honours related to {t} for {d}.",
                d = pair.disease,
                t = pair.treatment
            ));
        }
        if prompt.ends_with(PAIRWISE_END) {
            let parts = parse_pairwise_prompt(prompt)
                .ok_or_else(|| BackendError::Protocol("unparseable pairwise prompt".into()))?;
            let a = self.grade(parts.query_text, parts.first);
            let b = self.grade(parts.query_text, parts.second);
            return Ok(match a.cmp(&b) {
                std::cmp::Ordering::Greater => "Doctor A".into(),
                std::cmp::Ordering::Less => "Doctor B".into(),
                std::cmp::Ordering::Equal => match self.tie_mode {
                    TieMode::Positional => "Doctor A".into(),
                    TieMode::Abstain => "Both are equally relevant.".into(),
                },
            });
        }
        if prompt.ends_with(LISTWISE_END) {
            let parts = parse_listwise_prompt(prompt)
                .ok_or_else(|| BackendError::Protocol("unparseable listwise prompt".into()))?;
            let mut order: Vec<usize> = (0..parts.passages.len()).collect();
            order.sort_by_key(|i| std::cmp::Reverse(self.grade(parts.query_text, parts.passages[*i])));
            return Ok(format_permutation(&order));
        }
        Err(BackendError::Protocol("oracle cannot interpret prompt".into()))
    }
}

impl Backend for OracleBackend {
    fn identity(&self) -> String {
        format!("oracle:{}", self.model_id)
    }

    fn tokenizer(&self) -> Option<Arc<dyn Tokenizer>> {
        Some(Arc::new(ReferenceTokenizer))
    }

    fn next_token_logprobs(&self, req: &LogprobRequest<'_>) -> Result<Vec<TokenLogprob>, BackendError> {
        let parts = parse_ranking_prompt(req.prompt)
            .filter(|p| p.label.is_none())
            .ok_or_else(|| BackendError::Protocol("oracle expects a ranking prompt".into()))?;
        let grade = self.grade(parts.query_text, parts.profile_text);
        let lps = self.label_logprobs(grade, req.label_tokens.len());
        Ok(req
            .label_tokens
            .iter()
            .zip(lps)
            .map(|(token, logprob)| TokenLogprob {
                token: token.clone(),
                logprob,
            })
            .collect())
    }

    fn generate(&self, req: &GenerateRequest<'_>) -> Result<GenerationResult, BackendError> {
        Ok(budgeted(self.answer(req.prompt)?, req.max_new_tokens))
    }
}

/// Backend whose answers are a pure hash of (seed, prompt).
///
/// Label logits are `-5 + 10 * h / 2^64` with `h` a 64-bit hash of the
/// seed, the prompt digest and the label index.
pub struct NoiseBackend {
    seed: u64,
    model_id: String,
}

impl NoiseBackend {
    pub fn new(seed: u64, model_id: impl Into<String>) -> Self {
        NoiseBackend {
            seed,
            model_id: model_id.into(),
        }
    }

    fn hash(&self, prompt_digest: &[u8], index: u64) -> u64 {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(prompt_digest);
        h.update(index.to_le_bytes());
        let out = h.finalize();
        u64::from_le_bytes(out[..8].try_into().unwrap())
    }

    pub fn logit(&self, prompt: &str, label_index: usize) -> f64 {
        let digest = Sha256::digest(prompt.as_bytes());
        -5.0 + 10.0 * (self.hash(&digest, label_index as u64) as f64 / 2f64.powi(64))
    }

    fn rng(&self, prompt: &str) -> ChaCha8Rng {
        let digest = Sha256::digest(prompt.as_bytes());
        ChaCha8Rng::seed_from_u64(self.hash(&digest, u64::MAX))
    }
}

const NOISE_WORDS: [&str; 12] = [
    "clinical", "experience", "surgery", "outcomes", "department", "research", "patients",
    "treatment", "oncology", "guidelines", "expertise", "hospital",
];

impl Backend for NoiseBackend {
    fn identity(&self) -> String {
        format!("noise:{}:{}", self.seed, self.model_id)
    }

    fn tokenizer(&self) -> Option<Arc<dyn Tokenizer>> {
        Some(Arc::new(ReferenceTokenizer))
    }

    fn next_token_logprobs(&self, req: &LogprobRequest<'_>) -> Result<Vec<TokenLogprob>, BackendError> {
        Ok(req
            .label_tokens
            .iter()
            .enumerate()
            .map(|(k, token)| TokenLogprob {
                token: token.clone(),
                logprob: self.logit(req.prompt, k),
            })
            .collect())
    }

    fn generate(&self, req: &GenerateRequest<'_>) -> Result<GenerationResult, BackendError> {
        let mut rng = self.rng(req.prompt);
        let text = if req.prompt.ends_with(PAIRWISE_END) {
            if rng.gen::<bool>() { "Doctor A" } else { "Doctor B" }.to_string()
        } else if let Some(parts) = req
            .prompt
            .ends_with(LISTWISE_END)
            .then(|| parse_listwise_prompt(req.prompt))
            .flatten()
        {
            // A shuffled list with occasional duplicates and out-of-range ids.
            let n = parts.passages.len();
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            let keep = rng.gen_range(0..=n);
            let mut ids: Vec<usize> = order[..keep].iter().map(|i| i + 1).collect();
            if n > 0 && rng.gen_bool(0.5) {
                ids.push(rng.gen_range(1..=n));
            }
            if rng.gen_bool(0.3) {
                ids.push(n + 1 + rng.gen_range(0..5));
            }
            ids.iter().map(|i| format!("[{i}]")).collect::<Vec<_>>().join(" > ")
        } else {
            let n = rng.gen_range(8..40);
            let words: Vec<&str> = (0..n)
                .map(|_| NOISE_WORDS[rng.gen_range(0..NOISE_WORDS.len())])
                .collect();
            format!(" {}.", words.join(" "))
        };
        Ok(budgeted(text, req.max_new_tokens))
    }
}

/// Serves responses previously recorded under `identity` in a cache directory.
pub struct ReplayBackend {
    store: ResponseCache,
    identity: String,
    tokenizer: Option<Arc<dyn Tokenizer>>,
}

impl ReplayBackend {
    pub fn open(
        dir: impl Into<PathBuf>,
        identity: impl Into<String>,
        tokenizer: Option<Arc<dyn Tokenizer>>,
    ) -> Result<Self, BackendError> {
        Ok(ReplayBackend {
            store: ResponseCache::open(dir)?,
            identity: identity.into(),
            tokenizer,
        })
    }

    fn lookup(&self, kind: RequestKind, prompt: &str, params: &serde_json::Value) -> Result<serde_json::Value, BackendError> {
        let key = request_key(&self.identity, kind, prompt, params);
        self.store
            .peek(&key)?
            .map(|r| r.response)
            .ok_or_else(|| BackendError::Protocol(format!("no recorded response for key {key}")))
    }
}

impl Backend for ReplayBackend {
    fn identity(&self) -> String {
        self.identity.clone()
    }

    fn tokenizer(&self) -> Option<Arc<dyn Tokenizer>> {
        self.tokenizer.clone()
    }

    fn next_token_logprobs(&self, req: &LogprobRequest<'_>) -> Result<Vec<TokenLogprob>, BackendError> {
        let v = self.lookup(
            RequestKind::Logprobs,
            req.prompt,
            &logprob_params(req.top_k, req.label_tokens),
        )?;
        serde_json::from_value(v).map_err(|e| BackendError::Protocol(e.to_string()))
    }

    fn generate(&self, req: &GenerateRequest<'_>) -> Result<GenerationResult, BackendError> {
        let v = self.lookup(RequestKind::Generate, req.prompt, &generate_params(req.max_new_tokens))?;
        serde_json::from_value(v).map_err(|e| BackendError::Protocol(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::Gateway;
    use crate::domain::LabelScheme;
    use crate::prompts::{pairwise_prompt, ranking_prompt};

    const Q: &str = "I want to find a doctor specializing in surgery for lung cancer.";

    fn oracle() -> OracleBackend {
        OracleBackend::new(
            "t",
            (0..=5).map(|g| OracleJudgment {
                query_text: Q.into(),
                profile_text: format!("Title: doctor {g}"),
                grade: g,
            }),
        )
    }

    #[test]
    fn oracle_plants_argmax_with_margin() {
        let o = oracle();
        for n in 2..=5 {
            let mut prev = f64::NEG_INFINITY;
            for g in 0..=5 {
                let lp = o.label_logprobs(g, n);
                let mut sorted = lp.clone();
                sorted.sort_by(|a, b| b.total_cmp(a));
                assert!(sorted[0] - sorted[1] >= 5.0 - 1e-9, "n={n} g={g}");
                let expect: f64 = lp.iter().enumerate().map(|(k, v)| k as f64 * v.exp()).sum();
                assert!(expect > prev);
                prev = expect;
            }
        }
        let gw = Gateway::new(Arc::new(oracle()), 1, 20);
        let s = LabelScheme::default();
        let p = ranking_prompt(Q, "Title: doctor 5", &s, None);
        assert_eq!(gw.fetch_label_logits(&p, &s).unwrap().argmax(), 4);
        let prefixed = format!("I am male. {Q}");
        let p = ranking_prompt(&prefixed, "Title: doctor 0", &s, None);
        assert_eq!(gw.fetch_label_logits(&p, &s).unwrap().argmax(), 0);
    }

    #[test]
    fn oracle_pairwise_ties_follow_mode() {
        let o = oracle();
        let p = pairwise_prompt(Q, "Title: doctor 2", "Title: doctor 4");
        assert_eq!(o.answer(&p).unwrap(), "Doctor B");
        let p = pairwise_prompt(Q, "Title: unknown", "Title: doctor 0");
        assert_eq!(o.answer(&p).unwrap(), "Doctor A");
        let o = o.with_tie_mode(TieMode::Abstain);
        assert!(!o.answer(&p).unwrap().contains("Doctor"));
    }

    #[test]
    fn generation_respects_budget() {
        let gw = Gateway::new(Arc::new(NoiseBackend::new(1, "n")), 1, 20);
        let g = gw.generate_text("anything", 1).unwrap();
        assert!(ReferenceTokenizer.count(&g.text) <= 1);
        assert_eq!(g.finish_reason, FinishReason::Length);
        let gw = Gateway::new(Arc::new(oracle()), 1, 20);
        let g = gw.generate_text("nonsense", 4);
        assert!(matches!(g, Err(BackendError::Protocol(_))));
    }

    #[test]
    fn noise_is_deterministic_and_prompt_sensitive() {
        let s = LabelScheme::default();
        let a = Gateway::new(Arc::new(NoiseBackend::new(9, "n")), 1, 20);
        let b = Gateway::new(Arc::new(NoiseBackend::new(9, "n")), 1, 20);
        let x = a.fetch_label_logits("prompt one", &s).unwrap();
        let y = b.fetch_label_logits("prompt one", &s).unwrap();
        assert_eq!(
            serde_json::to_vec(&x).unwrap(),
            serde_json::to_vec(&y).unwrap()
        );
        assert!(x.values().iter().all(|v| (-5.0..=5.0).contains(v)));
        let z = a.fetch_label_logits("prompt two", &s).unwrap();
        assert_ne!(x, z);
    }
}
