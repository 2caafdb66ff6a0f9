//! OpenAI-compatible HTTP clients.
//!
//! * embeddings: `POST {endpoint}/embeddings` with `{"model", "input"}`
//! * generation: `POST {endpoint}/chat/completions`, optionally streamed as
//!   server-sent events terminated by `data: [DONE]`
//! * reranking: `POST {endpoint}/rerank` with `{"model", "query", "documents"}`
//!   answering `{"results": [{"index", "relevance_score"}]}`
//!
//! Connect timeout is 5 s, read timeout 120 s. Transient failures
//! (connection errors, 408, 429, 5xx) are retried up to three times with
//! delays of 250 ms, 1 s and 4 s, each stretched by up to 20% jitter.

use std::io::{BufRead, BufReader};
use std::sync::{Arc, OnceLock};
use std::time::Duration;

use rand::Rng;
use serde_json::{json, Value};

use super::{
    Embedder, GatewayError, GenerationEvent, GenerationRequest, GenerationStream, Generator, ModelHandle, ModelRole,
    ModelSpec, Reranker,
};

pub const CONNECT_TIMEOUT: Duration = Duration::from_secs(5);
pub const READ_TIMEOUT: Duration = Duration::from_secs(120);

#[derive(Debug, Clone)]
pub struct RetryPolicy {
    pub delays: Vec<Duration>,
    pub jitter: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            delays: vec![Duration::from_millis(250), Duration::from_secs(1), Duration::from_secs(4)],
            jitter: 0.2,
        }
    }
}

struct Failure {
    transient: bool,
    status: Option<u16>,
    message: String,
}

impl RetryPolicy {
    fn run<T>(&self, mut attempt: impl FnMut() -> Result<T, Failure>) -> Result<T, GatewayError> {
        let mut attempts = 0u32;
        loop {
            attempts += 1;
            match attempt() {
                Ok(v) => return Ok(v),
                Err(f) => {
                    let retry_idx = (attempts - 1) as usize;
                    if !f.transient || retry_idx >= self.delays.len() {
                        return Err(GatewayError::EndpointError { status: f.status, attempts, message: f.message });
                    }
                    let base = self.delays[retry_idx];
                    let stretch = 1.0 + rand::rng().random::<f64>() * self.jitter;
                    std::thread::sleep(base.mul_f64(stretch));
                }
            }
        }
    }
}

/// Blocking client for one remote model.
pub struct HttpModel {
    base_url: String,
    model: String,
    api_key_env: Option<String>,
    retry: RetryPolicy,
    // built lazily: the blocking client must not be created on an async runtime thread
    client: OnceLock<reqwest::blocking::Client>,
    dim: usize,
}

impl HttpModel {
    pub fn new(spec: &ModelSpec, retry: RetryPolicy) -> Self {
        Self {
            base_url: spec.endpoint_url.clone().unwrap_or_default().trim_end_matches('/').to_string(),
            model: spec.remote_model.clone().unwrap_or_else(|| spec.model_id.clone()),
            api_key_env: spec.api_key_env.clone(),
            retry,
            client: OnceLock::new(),
            dim: spec.dim.unwrap_or(0),
        }
    }

    fn client(&self) -> &reqwest::blocking::Client {
        self.client.get_or_init(|| {
            reqwest::blocking::Client::builder()
                .connect_timeout(CONNECT_TIMEOUT)
                .timeout(READ_TIMEOUT)
                .build()
                .expect("http client construction")
        })
    }

    fn send(&self, path: &str, body: &Value) -> Result<reqwest::blocking::Response, Failure> {
        let mut req = self.client().post(format!("{}/{path}", self.base_url)).json(body);
        if let Some(var) = &self.api_key_env {
            if let Ok(key) = std::env::var(var) {
                req = req.bearer_auth(key);
            }
        }
        let resp = req.send().map_err(|e| Failure {
            transient: e.is_connect() || e.is_timeout() || e.is_request(),
            status: None,
            message: e.to_string(),
        })?;
        let status = resp.status();
        if status.is_success() {
            return Ok(resp);
        }
        let code = status.as_u16();
        let message = resp.text().unwrap_or_default();
        Err(Failure { transient: code == 408 || code == 429 || status.is_server_error(), status: Some(code), message })
    }

    fn post_json(&self, path: &str, body: &Value) -> Result<Value, GatewayError> {
        self.retry.run(|| {
            let resp = self.send(path, body)?;
            resp.json::<Value>().map_err(|e| Failure { transient: false, status: None, message: e.to_string() })
        })
    }

    fn chat_body(&self, req: &GenerationRequest, stream: bool) -> Value {
        let mut body = json!({
            "model": self.model,
            "messages": [{"role": "user", "content": req.prompt}],
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
            "stream": stream,
        });
        if let Some(seed) = req.seed {
            body["seed"] = json!(seed);
        }
        body
    }
}

fn malformed(message: impl Into<String>) -> GatewayError {
    GatewayError::EndpointError { status: None, attempts: 1, message: message.into() }
}

impl Embedder for HttpModel {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, GatewayError> {
        let v = self.post_json("embeddings", &json!({"model": self.model, "input": texts}))?;
        let data = v["data"].as_array().ok_or_else(|| malformed("embedding response lacks `data`"))?;
        let mut out: Vec<Option<Vec<f32>>> = vec![None; texts.len()];
        for (pos, item) in data.iter().enumerate() {
            let idx = item["index"].as_u64().map(|i| i as usize).unwrap_or(pos);
            let emb = item["embedding"]
                .as_array()
                .ok_or_else(|| malformed("embedding item lacks `embedding`"))?
                .iter()
                .map(|x| x.as_f64().map(|f| f as f32).ok_or_else(|| malformed("non-numeric embedding value")))
                .collect::<Result<Vec<f32>, _>>()?;
            let slot = out.get_mut(idx).ok_or_else(|| malformed(format!("embedding index {idx} out of range")))?;
            *slot = Some(emb);
        }
        out.into_iter()
            .enumerate()
            .map(|(i, v)| v.ok_or_else(|| malformed(format!("missing embedding for input {i}"))))
            .collect()
    }
}

impl Generator for HttpModel {
    fn generate(&self, req: &GenerationRequest) -> Result<String, GatewayError> {
        let v = self.post_json("chat/completions", &self.chat_body(req, false))?;
        v["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| malformed("completion response lacks choices[0].message.content"))
    }

    fn generate_stream(&self, req: &GenerationRequest) -> Result<GenerationStream, GatewayError> {
        let body = self.chat_body(req, true);
        let resp = self.retry.run(|| self.send("chat/completions", &body))?;
        Ok(Box::new(SseDeltas { lines: BufReader::new(resp).lines(), finished: false, emitted: false }))
    }
}

struct SseDeltas<R: BufRead> {
    lines: std::io::Lines<R>,
    finished: bool,
    emitted: bool,
}

impl<R: BufRead> Iterator for SseDeltas<R> {
    type Item = Result<GenerationEvent, GatewayError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.finished {
            return None;
        }
        loop {
            let line = match self.lines.next() {
                Some(Ok(l)) => l,
                Some(Err(e)) => {
                    self.finished = true;
                    return Some(Err(malformed(e.to_string())));
                }
                // stream closed without [DONE]
                None => return Some(Ok(self.finish())),
            };
            let Some(data) = line.strip_prefix("data:") else { continue };
            let data = data.trim();
            if data == "[DONE]" {
                return Some(Ok(self.finish()));
            }
            let v: Value = match serde_json::from_str(data) {
                Ok(v) => v,
                Err(e) => {
                    self.finished = true;
                    return Some(Err(malformed(e.to_string())));
                }
            };
            if let Some(text) = v["choices"][0]["delta"]["content"].as_str() {
                if !text.is_empty() {
                    self.emitted = true;
                    return Some(Ok(GenerationEvent::TokenDelta { text: text.to_string() }));
                }
            }
        }
    }
}

impl<R: BufRead> SseDeltas<R> {
    fn finish(&mut self) -> GenerationEvent {
        if !self.emitted {
            // at least one delta precedes Done
            self.emitted = true;
            return GenerationEvent::TokenDelta { text: String::new() };
        }
        self.finished = true;
        GenerationEvent::Done
    }
}

impl Reranker for HttpModel {
    fn score(&self, query: &str, candidates: &[String]) -> Result<Vec<(usize, f32)>, GatewayError> {
        let v = self.post_json("rerank", &json!({"model": self.model, "query": query, "documents": candidates}))?;
        let results = v["results"].as_array().ok_or_else(|| malformed("rerank response lacks `results`"))?;
        results
            .iter()
            .map(|r| {
                let idx = r["index"].as_u64().ok_or_else(|| malformed("rerank result lacks index"))? as usize;
                let score = r["relevance_score"]
                    .as_f64()
                    .or_else(|| r["score"].as_f64())
                    .ok_or_else(|| malformed("rerank result lacks relevance_score"))?;
                Ok((idx, score as f32))
            })
            .collect()
    }
}

pub(super) fn build(spec: &ModelSpec) -> ModelHandle {
    build_with_retry(spec, RetryPolicy::default())
}

pub fn build_with_retry(spec: &ModelSpec, retry: RetryPolicy) -> ModelHandle {
    let m = Arc::new(HttpModel::new(spec, retry));
    match spec.role {
        ModelRole::Embedder => ModelHandle::Embedder(m),
        ModelRole::Reranker => ModelHandle::Reranker(m),
        ModelRole::Generator => ModelHandle::Generator(m),
    }
}
