//! OpenAI-compatible completion endpoint client.
//!
//! Requests are POSTed as JSON to `endpoint_url`:
//!
//! ```json
//! {"model": "<model_id>", "prompt": "<raw prompt>", "max_tokens": 1,
//!  "temperature": 0, "logprobs": <top_logprobs>, "echo": false}
//! ```
//!
//! Next-token alternatives are read from
//! `choices[0].logprobs.top_logprobs[0]` (a `{token: logprob}` map), or from
//! `choices[0].logprobs.content[0].top_logprobs` (a list of
//! `{"token", "logprob"}` objects) when a server answers in that shape.
//! Generated text comes from `choices[0].text` and `choices[0].finish_reason`.

use std::sync::Arc;

use reqwest::blocking::Client;
use serde_json::{json, Value};

use super::{
    Backend, BackendConfig, BackendError, FinishReason, GenerateRequest, GenerationResult,
    LogprobRequest, TokenLogprob,
};
use crate::tokenizer::Tokenizer;

pub struct HttpBackend {
    client: Client,
    url: String,
    model_id: String,
    credential: Option<String>,
}

impl HttpBackend {
    pub fn new(config: &BackendConfig) -> Result<Self, BackendError> {
        let url = config
            .endpoint_url
            .clone()
            .ok_or_else(|| BackendError::Config("endpoint_url is required".into()))?;
        let client = Client::builder()
            .timeout(config.timeout())
            .build()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        let credential = config
            .credential_env_var
            .as_deref()
            .and_then(|name| std::env::var(name).ok())
            .filter(|v| !v.is_empty());
        Ok(HttpBackend {
            client,
            url,
            model_id: config.model_id.clone(),
            credential,
        })
    }

    fn post(&self, body: &Value) -> Result<Value, BackendError> {
        let mut req = self.client.post(&self.url).json(body);
        if let Some(c) = &self.credential {
            req = req.bearer_auth(c);
        }
        let resp = req.send().map_err(classify)?;
        let status = resp.status();
        let text = resp.text().map_err(classify)?;
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(BackendError::Transport(format!("HTTP {status}: {text}")));
        }
        if !status.is_success() {
            return Err(BackendError::Protocol(format!("HTTP {status}: {text}")));
        }
        serde_json::from_str(&text)
            .map_err(|e| BackendError::Protocol(format!("response is not JSON: {e}")))
    }
}

fn classify(e: reqwest::Error) -> BackendError {
    if e.is_timeout() {
        BackendError::Timeout(e.to_string())
    } else {
        BackendError::Transport(e.to_string())
    }
}

fn first_choice(v: &Value) -> Result<&Value, BackendError> {
    v.get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| BackendError::Protocol("response has no choices".into()))
}

pub(crate) fn parse_top_logprobs(v: &Value) -> Result<Vec<TokenLogprob>, BackendError> {
    let lp = first_choice(v)?
        .get("logprobs")
        .filter(|l| !l.is_null())
        .ok_or_else(|| BackendError::Protocol("missing logprob payload".into()))?;
    if let Some(map) = lp
        .get("top_logprobs")
        .and_then(|t| t.get(0))
        .and_then(Value::as_object)
    {
        return Ok(map
            .iter()
            .filter_map(|(token, p)| {
                p.as_f64().map(|logprob| TokenLogprob {
                    token: token.clone(),
                    logprob,
                })
            })
            .collect());
    }
    if let Some(list) = lp
        .get("content")
        .and_then(|c| c.get(0))
        .and_then(|c| c.get("top_logprobs"))
        .and_then(Value::as_array)
    {
        return Ok(list
            .iter()
            .filter_map(|e| {
                Some(TokenLogprob {
                    token: e.get("token")?.as_str()?.to_string(),
                    logprob: e.get("logprob")?.as_f64()?,
                })
            })
            .collect());
    }
    Err(BackendError::Protocol("missing logprob payload".into()))
}

pub(crate) fn parse_generation(v: &Value) -> Result<GenerationResult, BackendError> {
    let choice = first_choice(v)?;
    let text = choice
        .get("text")
        .and_then(Value::as_str)
        .ok_or_else(|| BackendError::Protocol("choice has no text".into()))?;
    let finish_reason = match choice.get("finish_reason").and_then(Value::as_str) {
        Some("length") => FinishReason::Length,
        Some("error") => FinishReason::Error,
        _ => FinishReason::Stop,
    };
    Ok(GenerationResult {
        text: text.to_string(),
        finish_reason,
    })
}

impl Backend for HttpBackend {
    fn identity(&self) -> String {
        self.model_id.clone()
    }

    fn tokenizer(&self) -> Option<Arc<dyn Tokenizer>> {
        None
    }

    fn next_token_logprobs(&self, req: &LogprobRequest<'_>) -> Result<Vec<TokenLogprob>, BackendError> {
        let body = json!({
            "model": self.model_id,
            "prompt": req.prompt,
            "max_tokens": 1,
            "temperature": 0,
            "logprobs": req.top_k,
            "echo": false,
        });
        parse_top_logprobs(&self.post(&body)?)
    }

    fn generate(&self, req: &GenerateRequest<'_>) -> Result<GenerationResult, BackendError> {
        let body = json!({
            "model": self.model_id,
            "prompt": req.prompt,
            "max_tokens": req.max_new_tokens,
            "temperature": 0,
        });
        parse_generation(&self.post(&body)?)
    }
}
