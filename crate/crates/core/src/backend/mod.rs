//! Uniform access to text-generation backends.
//!
//! A [`Backend`] answers two kinds of request: the top-K next-token log
//! probabilities at the end of a prompt, and a greedy text continuation.
//! The [`Gateway`] wraps a backend with label-token matching, the
//! in-flight bound, a fixed three-attempt retry, call accounting and the
//! on-disk [`ResponseCache`].

mod cache;
mod http;
mod mock;

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::domain::LabelScheme;
use crate::tokenizer::{CharBudget, ReferenceTokenizer, Tokenizer};

pub use cache::{request_key, CacheRecord, CacheStats, RequestKind, ResponseCache};
pub use http::HttpBackend;
pub use mock::{NoiseBackend, OracleBackend, OracleJudgment, ReplayBackend, TieMode};

/// Offset below the smallest observed logprob given to labels missing from
/// the returned top-K list.
pub const FLOOR_OFFSET: f64 = 10.0;

/// Attempts per request before a transient failure is reported.
pub const MAX_ATTEMPTS: usize = 3;

/// Pause before retry `n` is `n` times this.
const RETRY_PAUSE: Duration = Duration::from_millis(100);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("labels `{first}` and `{second}` share first token `{token}`")]
    LabelTokenCollision {
        first: String,
        second: String,
        token: String,
    },
    #[error("backend timed out: {0}")]
    Timeout(String),
    #[error("backend protocol error: {0}")]
    Protocol(String),
    #[error("backend transport error: {0}")]
    Transport(String),
    #[error("backend configuration error: {0}")]
    Config(String),
    #[error("cache error: {0}")]
    Cache(String),
}

impl BackendError {
    fn is_transient(&self) -> bool {
        matches!(self, BackendError::Timeout(_) | BackendError::Transport(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    HttpOpenaiCompatible,
    Oracle,
    Noise,
    Replay,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenizerChoice {
    /// Whatever the backend offers, else the character budget.
    #[default]
    Backend,
    Reference,
    CharBudget,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub endpoint_url: Option<String>,
    pub model_id: String,
    pub request_timeout_secs: f64,
    pub max_in_flight: usize,
    /// Name of the environment variable holding the API credential.
    pub credential_env_var: Option<String>,
    pub top_logprobs: usize,
    /// Seed of the noise backend.
    pub seed: u64,
    /// Identity whose recorded responses the replay backend serves.
    pub replay_identity: Option<String>,
    /// Directory of recorded responses for the replay backend.
    pub replay_dir: Option<PathBuf>,
    pub tokenizer: TokenizerChoice,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            kind: BackendKind::Oracle,
            endpoint_url: None,
            model_id: "oracle".into(),
            request_timeout_secs: 60.0,
            max_in_flight: 4,
            credential_env_var: None,
            top_logprobs: 20,
            seed: 0,
            replay_identity: None,
            replay_dir: None,
            tokenizer: TokenizerChoice::Backend,
        }
    }
}

impl BackendConfig {
    pub fn validate(&self, scheme: &LabelScheme) -> Result<(), BackendError> {
        if self.max_in_flight == 0 {
            return Err(BackendError::Config("max_in_flight must be at least 1".into()));
        }
        if self.top_logprobs < scheme.len() {
            return Err(BackendError::Config(format!(
                "top_logprobs ({}) is smaller than the label count ({})",
                self.top_logprobs,
                scheme.len()
            )));
        }
        if self.request_timeout_secs.is_nan() || self.request_timeout_secs <= 0.0 {
            return Err(BackendError::Config("request_timeout_secs must be positive".into()));
        }
        if self.kind == BackendKind::HttpOpenaiCompatible && self.endpoint_url.is_none() {
            return Err(BackendError::Config("endpoint_url is required for http backends".into()));
        }
        if self.kind == BackendKind::Replay && self.replay_dir.is_none() {
            return Err(BackendError::Config("replay_dir is required for replay backends".into()));
        }
        Ok(())
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.request_timeout_secs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprob {
    pub token: String,
    pub logprob: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Stop,
    Length,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub text: String,
    pub finish_reason: FinishReason,
}

pub struct LogprobRequest<'a> {
    pub prompt: &'a str,
    pub top_k: usize,
    /// First tokens of the scheme's labels. HTTP backends ignore this; mock
    /// backends use it to decide which tokens to emit.
    pub label_tokens: &'a [String],
}

pub struct GenerateRequest<'a> {
    pub prompt: &'a str,
    pub max_new_tokens: usize,
}

pub trait Backend: Send + Sync {
    /// Stable name of the model behind this backend; part of every cache key.
    fn identity(&self) -> String;

    fn tokenizer(&self) -> Option<Arc<dyn Tokenizer>>;

    fn next_token_logprobs(&self, req: &LogprobRequest<'_>) -> Result<Vec<TokenLogprob>, BackendError>;

    fn generate(&self, req: &GenerateRequest<'_>) -> Result<GenerationResult, BackendError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogitSource {
    Observed,
    Floored,
}

/// Per-label raw log-confidences, aligned with a [`LabelScheme`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelLogits {
    values: Vec<f64>,
    sources: Vec<LogitSource>,
}

impl LabelLogits {
    pub fn new(values: Vec<f64>, sources: Vec<LogitSource>) -> Result<Self, BackendError> {
        if values.len() != sources.len() {
            return Err(BackendError::Protocol("logit/source length mismatch".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(BackendError::Protocol("non-finite logit".into()));
        }
        Ok(LabelLogits { values, sources })
    }

    /// All values observed. Panics on non-finite input.
    pub fn observed(values: Vec<f64>) -> Self {
        let n = values.len();
        LabelLogits::new(values, vec![LogitSource::Observed; n]).expect("finite logits")
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn sources(&self) -> &[LogitSource] {
        &self.sources
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Index of the largest logit; the lowest index wins ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, v) in self.values.iter().enumerate() {
            if *v > self.values[best] {
                best = i;
            }
        }
        best
    }

    pub fn floored_count(&self) -> usize {
        self.sources.iter().filter(|s| **s == LogitSource::Floored).count()
    }
}

/// Matches returned top-K entries against label first tokens. Labels that
/// are absent get `min(observed) - FLOOR_OFFSET`.
pub fn extract_label_logits(
    tops: &[TokenLogprob],
    label_tokens: &[String],
) -> Result<LabelLogits, BackendError> {
    let finite: Vec<f64> = tops.iter().map(|t| t.logprob).filter(|v| v.is_finite()).collect();
    if finite.is_empty() {
        return Err(BackendError::Protocol("missing logprob payload".into()));
    }
    let floor = finite.iter().copied().fold(f64::INFINITY, f64::min) - FLOOR_OFFSET;
    let mut values = Vec::with_capacity(label_tokens.len());
    let mut sources = Vec::with_capacity(label_tokens.len());
    for lt in label_tokens {
        let best = tops
            .iter()
            .filter(|t| t.logprob.is_finite() && t.token.trim() == lt.as_str())
            .map(|t| t.logprob)
            .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.max(v))));
        match best {
            Some(v) => {
                values.push(v);
                sources.push(LogitSource::Observed);
            }
            None => {
                values.push(floor);
                sources.push(LogitSource::Floored);
            }
        }
    }
    LabelLogits::new(values, sources)
}

/// Decoding parameters of a label-logit request, as they enter the cache key.
pub fn logprob_params(top_k: usize, label_tokens: &[String]) -> serde_json::Value {
    json!({
        "max_tokens": 1,
        "temperature": 0,
        "top_logprobs": top_k,
        "label_tokens": label_tokens,
    })
}

/// Decoding parameters of a greedy generation request.
pub fn generate_params(max_new_tokens: usize) -> serde_json::Value {
    json!({ "max_tokens": max_new_tokens, "temperature": 0 })
}

/// Counts requests, bounded by `max` concurrent holders.
struct InFlight {
    max: usize,
    current: Mutex<usize>,
    cv: Condvar,
    peak: AtomicUsize,
}

struct Permit<'a>(&'a InFlight);

impl InFlight {
    fn new(max: usize) -> Self {
        InFlight {
            max: max.max(1),
            current: Mutex::new(0),
            cv: Condvar::new(),
            peak: AtomicUsize::new(0),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut cur = self.current.lock().unwrap();
        while *cur >= self.max {
            cur = self.cv.wait(cur).unwrap();
        }
        *cur += 1;
        self.peak.fetch_max(*cur, Ordering::SeqCst);
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut cur = self.0.current.lock().unwrap();
        *cur -= 1;
        self.0.cv.notify_one();
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GatewayStats {
    /// Logprob requests that reached the backend (cache misses included, hits excluded).
    pub logprob_calls: u64,
    pub generate_calls: u64,
    pub cache: CacheStats,
    pub peak_in_flight: usize,
}

impl GatewayStats {
    pub fn backend_calls(&self) -> u64 {
        self.logprob_calls + self.generate_calls
    }
}

/// Thread-safe entry point for all backend traffic.
pub struct Gateway {
    backend: Arc<dyn Backend>,
    cache: Option<ResponseCache>,
    limiter: InFlight,
    top_logprobs: usize,
    tokenizer_choice: TokenizerChoice,
    logprob_calls: AtomicU64,
    generate_calls: AtomicU64,
    label_tokens: Mutex<HashMap<Vec<String>, Vec<String>>>,
}

impl Gateway {
    pub fn new(backend: Arc<dyn Backend>, max_in_flight: usize, top_logprobs: usize) -> Self {
        Gateway {
            backend,
            cache: None,
            limiter: InFlight::new(max_in_flight),
            top_logprobs,
            tokenizer_choice: TokenizerChoice::Backend,
            logprob_calls: AtomicU64::new(0),
            generate_calls: AtomicU64::new(0),
            label_tokens: Mutex::new(HashMap::new()),
        }
    }

    /// Builds the backend named by `config`. Oracle backends need their hidden
    /// judgments, which only the caller can supply.
    pub fn from_config(
        config: &BackendConfig,
        oracle: Option<OracleBackend>,
        cache_dir: Option<PathBuf>,
    ) -> Result<Self, BackendError> {
        let backend: Arc<dyn Backend> = match config.kind {
            BackendKind::HttpOpenaiCompatible => Arc::new(HttpBackend::new(config)?),
            BackendKind::Oracle => Arc::new(oracle.ok_or_else(|| {
                BackendError::Config("oracle backend requires hidden judgments".into())
            })?),
            BackendKind::Noise => Arc::new(NoiseBackend::new(config.seed, &config.model_id)),
            BackendKind::Replay => {
                let dir = config
                    .replay_dir
                    .clone()
                    .ok_or_else(|| BackendError::Config("replay_dir is required".into()))?;
                let identity = config
                    .replay_identity
                    .clone()
                    .unwrap_or_else(|| config.model_id.clone());
                let tokenizer: Option<Arc<dyn Tokenizer>> = match config.tokenizer {
                    TokenizerChoice::Reference => Some(Arc::new(ReferenceTokenizer)),
                    _ => None,
                };
                Arc::new(ReplayBackend::open(dir, identity, tokenizer)?)
            }
        };
        let mut gw = Gateway::new(backend, config.max_in_flight, config.top_logprobs);
        gw.tokenizer_choice = config.tokenizer;
        if let Some(dir) = cache_dir {
            gw = gw.with_cache(ResponseCache::open(dir)?);
        }
        Ok(gw)
    }

    pub fn with_cache(mut self, cache: ResponseCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn with_tokenizer_choice(mut self, choice: TokenizerChoice) -> Self {
        self.tokenizer_choice = choice;
        self
    }

    pub fn identity(&self) -> String {
        self.backend.identity()
    }

    pub fn max_in_flight(&self) -> usize {
        self.limiter.max
    }

    /// Tokenizer used for every truncation budget in a job.
    pub fn tokenizer(&self) -> Arc<dyn Tokenizer> {
        match self.tokenizer_choice {
            TokenizerChoice::Reference => Arc::new(ReferenceTokenizer),
            TokenizerChoice::CharBudget => Arc::new(CharBudget),
            TokenizerChoice::Backend => self
                .backend
                .tokenizer()
                .unwrap_or_else(|| Arc::new(CharBudget)),
        }
    }

    pub fn stats(&self) -> GatewayStats {
        GatewayStats {
            logprob_calls: self.logprob_calls.load(Ordering::SeqCst),
            generate_calls: self.generate_calls.load(Ordering::SeqCst),
            cache: self.cache.as_ref().map(|c| c.stats()).unwrap_or_default(),
            peak_in_flight: self.limiter.peak.load(Ordering::SeqCst),
        }
    }

    /// First token of every label, checked for collisions once per scheme.
    ///
    /// Without a backend tokenizer the first whitespace-delimited word of
    /// the label stands in for its first token.
    pub fn label_first_tokens(&self, scheme: &LabelScheme) -> Result<Vec<String>, BackendError> {
        let names: Vec<String> = scheme.names().map(str::to_string).collect();
        if let Some(t) = self.label_tokens.lock().unwrap().get(&names) {
            return Ok(t.clone());
        }
        let tokenizer = self.backend.tokenizer();
        let tokens: Vec<String> = names
            .iter()
            .map(|n| match &tokenizer {
                Some(t) => t.first_token(n).unwrap_or("").trim().to_string(),
                None => n.split_whitespace().next().unwrap_or("").to_string(),
            })
            .collect();
        for i in 0..tokens.len() {
            for j in i + 1..tokens.len() {
                if tokens[i] == tokens[j] {
                    return Err(BackendError::LabelTokenCollision {
                        first: names[i].clone(),
                        second: names[j].clone(),
                        token: tokens[i].clone(),
                    });
                }
            }
        }
        self.label_tokens
            .lock()
            .unwrap()
            .insert(names, tokens.clone());
        Ok(tokens)
    }

    /// Next-token label logits at the end of `prompt`.
    pub fn fetch_label_logits(
        &self,
        prompt: &str,
        scheme: &LabelScheme,
    ) -> Result<LabelLogits, BackendError> {
        if self.top_logprobs < scheme.len() {
            return Err(BackendError::Config(format!(
                "top_logprobs ({}) is smaller than the label count ({})",
                self.top_logprobs,
                scheme.len()
            )));
        }
        let label_tokens = self.label_first_tokens(scheme)?;
        let params = logprob_params(self.top_logprobs, &label_tokens);
        let response = self.cached(RequestKind::Logprobs, prompt, &params, || {
            self.logprob_calls.fetch_add(1, Ordering::SeqCst);
            let req = LogprobRequest {
                prompt,
                top_k: self.top_logprobs,
                label_tokens: &label_tokens,
            };
            let tops = self.backend.next_token_logprobs(&req)?;
            Ok(serde_json::to_value(tops).expect("logprobs serialize"))
        })?;
        let tops: Vec<TokenLogprob> = serde_json::from_value(response)
            .map_err(|e| BackendError::Protocol(format!("malformed logprob record: {e}")))?;
        extract_label_logits(&tops, &label_tokens)
    }

    /// Greedy continuation of `prompt`, at most `max_new_tokens` tokens.
    pub fn generate_text(
        &self,
        prompt: &str,
        max_new_tokens: usize,
    ) -> Result<GenerationResult, BackendError> {
        if max_new_tokens == 0 {
            return Err(BackendError::Config("max_new_tokens must be at least 1".into()));
        }
        let params = generate_params(max_new_tokens);
        let response = self.cached(RequestKind::Generate, prompt, &params, || {
            self.generate_calls.fetch_add(1, Ordering::SeqCst);
            let req = GenerateRequest {
                prompt,
                max_new_tokens,
            };
            let out = self.backend.generate(&req)?;
            Ok(serde_json::to_value(out).expect("generation serializes"))
        })?;
        serde_json::from_value(response)
            .map_err(|e| BackendError::Protocol(format!("malformed generation record: {e}")))
    }

    fn cached(
        &self,
        kind: RequestKind,
        prompt: &str,
        params: &serde_json::Value,
        call: impl Fn() -> Result<serde_json::Value, BackendError>,
    ) -> Result<serde_json::Value, BackendError> {
        // Keys are only needed with a cache; hashing every request is not free.
        let keyed = match &self.cache {
            Some(cache) => {
                let identity = self.backend.identity();
                let key = request_key(&identity, kind, prompt, params);
                if let Some(hit) = cache.get(&key)? {
                    return Ok(hit);
                }
                Some((cache, identity, key))
            }
            None => None,
        };
        let response = {
            let _permit = self.limiter.acquire();
            let mut attempt = 0;
            loop {
                attempt += 1;
                match call() {
                    Ok(v) => break v,
                    Err(e) if e.is_transient() && attempt < MAX_ATTEMPTS => {
                        log::warn!("attempt {attempt} failed: {e}; retrying");
                        std::thread::sleep(RETRY_PAUSE * attempt as u32);
                    }
                    Err(e) => return Err(e),
                }
            }
        };
        match keyed {
            Some((cache, identity, key)) => {
                let record = CacheRecord::new(key, identity, kind, prompt, params.clone(), response);
                cache.put(&record)?;
                Ok(record.response)
            }
            None => Ok(response),
        }
    }
}
