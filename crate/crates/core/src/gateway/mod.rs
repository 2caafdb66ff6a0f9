//! Model registry and client layer.
//!
//! Models are registered under a unique `model_id` with one of three roles.
//! Each role is served either by an OpenAI-compatible HTTP endpoint or by a
//! deterministic in-process mock. Callers go through [`Gateway`], which
//! enforces role checks, dimension checks and context limits uniformly.

pub mod http;
pub mod mock;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tokenize::count_tokens;

pub use mock::{mock_embedder_construction, ScriptRule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelRole {
    Embedder,
    Reranker,
    Generator,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    HttpEndpoint,
    Mock,
}

/// Registry entry describing one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub model_id: String,
    pub role: ModelRole,
    pub kind: ModelKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint_url: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_context_tokens: Option<usize>,
    /// Model name sent to the remote endpoint; defaults to `model_id`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub remote_model: Option<String>,
    /// Mock flavor: `hash` or `bag_of_words` (embedders), `identity` or
    /// `lexical_overlap` (rerankers), `scripted` (generators).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mock: Option<String>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rules: Vec<ScriptRule>,
    /// Path to a TOML file with additional `[[rules]]`, relative to the
    /// registry file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub script: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default_response: Option<String>,
}

impl ModelSpec {
    pub fn mock(model_id: &str, role: ModelRole) -> Self {
        Self {
            model_id: model_id.to_string(),
            role,
            kind: ModelKind::Mock,
            endpoint_url: None,
            api_key_env: None,
            dim: None,
            max_context_tokens: None,
            remote_model: None,
            mock: None,
            seed: 0,
            rules: Vec::new(),
            script: None,
            default_response: None,
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        let bad = |reason: &str| GatewayError::InvalidSpec { model_id: self.model_id.clone(), reason: reason.into() };
        if self.model_id.is_empty() {
            return Err(bad("model_id must be non-empty"));
        }
        if self.kind == ModelKind::HttpEndpoint && self.endpoint_url.is_none() {
            return Err(bad("http_endpoint models need endpoint_url"));
        }
        if self.role == ModelRole::Embedder {
            match self.dim {
                None => return Err(bad("embedders need dim")),
                Some(d) if d < 2 => return Err(bad("dim must be at least 2")),
                _ => {}
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub prompt: String,
    #[serde(default)]
    pub temperature: f64,
    pub max_tokens: usize,
    #[serde(default)]
    pub stream: bool,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl GenerationRequest {
    pub fn new(prompt: impl Into<String>) -> Self {
        Self { prompt: prompt.into(), temperature: 0.0, max_tokens: 512, stream: false, seed: None }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum GenerationEvent {
    TokenDelta { text: String },
    Done,
}

pub type GenerationStream = Box<dyn Iterator<Item = Result<GenerationEvent, GatewayError>> + Send>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GatewayError {
    #[error("model not found: {0}")]
    ModelNotFound(String),
    #[error("model {model_id} has role {actual:?}, expected {expected:?}")]
    WrongRole { model_id: String, expected: ModelRole, actual: ModelRole },
    #[error("duplicate model id: {0}")]
    DuplicateModel(String),
    #[error("invalid model spec {model_id}: {reason}")]
    InvalidSpec { model_id: String, reason: String },
    #[error("endpoint error (status {status:?}) after {attempts} attempt(s): {message}")]
    EndpointError { status: Option<u16>, attempts: u32, message: String },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("prompt has {prompt_tokens} tokens, model limit is {max_context_tokens}")]
    ContextOverflow { prompt_tokens: usize, max_context_tokens: usize },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("registry file {path}: {message}")]
    Registry { path: String, message: String },
}

pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, GatewayError>;
}

pub trait Generator: Send + Sync {
    fn generate(&self, req: &GenerationRequest) -> Result<String, GatewayError>;
    fn generate_stream(&self, req: &GenerationRequest) -> Result<GenerationStream, GatewayError>;
}

pub trait Reranker: Send + Sync {
    /// Raw `(candidate index, score)` pairs in any order.
    fn score(&self, query: &str, candidates: &[String]) -> Result<Vec<(usize, f32)>, GatewayError>;
}

#[derive(Clone)]
pub enum ModelHandle {
    Embedder(Arc<dyn Embedder>),
    Reranker(Arc<dyn Reranker>),
    Generator(Arc<dyn Generator>),
}

impl ModelHandle {
    fn role(&self) -> ModelRole {
        match self {
            ModelHandle::Embedder(_) => ModelRole::Embedder,
            ModelHandle::Reranker(_) => ModelRole::Reranker,
            ModelHandle::Generator(_) => ModelRole::Generator,
        }
    }
}

#[derive(Clone)]
struct Entry {
    spec: ModelSpec,
    handle: ModelHandle,
}

#[derive(Debug, Default, Deserialize)]
struct RegistryFile {
    #[serde(default)]
    models: Vec<ModelSpec>,
}

#[derive(Debug, Default, Deserialize)]
struct ScriptFile {
    #[serde(default)]
    rules: Vec<ScriptRule>,
    #[serde(default)]
    default_response: Option<String>,
}

/// Shared model registry. Cheap to clone; safe for concurrent calls.
#[derive(Clone, Default)]
pub struct Gateway {
    models: Arc<RwLock<BTreeMap<String, Entry>>>,
}

impl Gateway {
    pub fn new() -> Self {
        Self::default()
    }

    /// Loads every `[[models]]` entry of a `models.toml` file.
    pub fn from_registry_file(path: &Path) -> Result<Self, GatewayError> {
        let gw = Self::new();
        gw.load_registry_file(path)?;
        Ok(gw)
    }

    pub fn load_registry_file(&self, path: &Path) -> Result<(), GatewayError> {
        let reg_err = |message: String| GatewayError::Registry { path: path.display().to_string(), message };
        let text = std::fs::read_to_string(path).map_err(|e| reg_err(e.to_string()))?;
        let file: RegistryFile = toml::from_str(&text).map_err(|e| reg_err(e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for mut spec in file.models {
            if let Some(script) = spec.script.take() {
                let script_path = base.join(&script);
                let s = std::fs::read_to_string(&script_path)
                    .map_err(|e| reg_err(format!("{}: {e}", script_path.display())))?;
                let sf: ScriptFile = toml::from_str(&s).map_err(|e| reg_err(format!("{}: {e}", script_path.display())))?;
                spec.rules.extend(sf.rules);
                if spec.default_response.is_none() {
                    spec.default_response = sf.default_response;
                }
                spec.script = Some(script);
            }
            self.register(spec)?;
        }
        Ok(())
    }

    /// Builds the client for `spec` and registers it.
    pub fn register(&self, spec: ModelSpec) -> Result<(), GatewayError> {
        spec.validate()?;
        let handle = match spec.kind {
            ModelKind::Mock => mock::build(&spec)?,
            ModelKind::HttpEndpoint => http::build(&spec),
        };
        self.insert(spec, handle)
    }

    /// Registers a caller-supplied in-process model.
    pub fn register_handle(&self, spec: ModelSpec, handle: ModelHandle) -> Result<(), GatewayError> {
        spec.validate()?;
        if handle.role() != spec.role {
            return Err(GatewayError::WrongRole {
                model_id: spec.model_id,
                expected: spec.role,
                actual: handle.role(),
            });
        }
        self.insert(spec, handle)
    }

    fn insert(&self, spec: ModelSpec, handle: ModelHandle) -> Result<(), GatewayError> {
        let mut models = self.models.write().expect("registry lock poisoned");
        if models.contains_key(&spec.model_id) {
            return Err(GatewayError::DuplicateModel(spec.model_id));
        }
        models.insert(spec.model_id.clone(), Entry { spec, handle });
        Ok(())
    }

    pub fn remove(&self, model_id: &str) -> Result<ModelSpec, GatewayError> {
        self.models
            .write()
            .expect("registry lock poisoned")
            .remove(model_id)
            .map(|e| e.spec)
            .ok_or_else(|| GatewayError::ModelNotFound(model_id.to_string()))
    }

    pub fn list(&self) -> Vec<ModelSpec> {
        self.models.read().expect("registry lock poisoned").values().map(|e| e.spec.clone()).collect()
    }

    pub fn spec(&self, model_id: &str) -> Result<ModelSpec, GatewayError> {
        self.entry(model_id).map(|e| e.spec)
    }

    fn entry(&self, model_id: &str) -> Result<Entry, GatewayError> {
        self.models
            .read()
            .expect("registry lock poisoned")
            .get(model_id)
            .cloned()
            .ok_or_else(|| GatewayError::ModelNotFound(model_id.to_string()))
    }

    fn wrong_role(e: &Entry, expected: ModelRole) -> GatewayError {
        GatewayError::WrongRole { model_id: e.spec.model_id.clone(), expected, actual: e.spec.role }
    }

    /// Embedding dimension declared for an embedder.
    pub fn embedding_dim(&self, model_id: &str) -> Result<usize, GatewayError> {
        let e = self.entry(model_id)?;
        match &e.handle {
            ModelHandle::Embedder(m) => Ok(e.spec.dim.unwrap_or_else(|| m.dim())),
            _ => Err(Self::wrong_role(&e, ModelRole::Embedder)),
        }
    }

    /// One vector per input text, in input order.
    pub fn embed(&self, model_id: &str, texts: &[String]) -> Result<Vec<Vec<f32>>, GatewayError> {
        let e = self.entry(model_id)?;
        let ModelHandle::Embedder(m) = &e.handle else {
            return Err(Self::wrong_role(&e, ModelRole::Embedder));
        };
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let expected = e.spec.dim.unwrap_or_else(|| m.dim());
        let out = m.embed(texts)?;
        if out.len() != texts.len() {
            return Err(GatewayError::EndpointError {
                status: None,
                attempts: 1,
                message: format!("expected {} vectors, got {}", texts.len(), out.len()),
            });
        }
        if let Some(v) = out.iter().find(|v| v.len() != expected) {
            return Err(GatewayError::DimensionMismatch { expected, got: v.len() });
        }
        Ok(out)
    }

    fn generator(&self, model_id: &str, req: &GenerationRequest) -> Result<Arc<dyn Generator>, GatewayError> {
        let e = self.entry(model_id)?;
        let ModelHandle::Generator(g) = &e.handle else {
            return Err(Self::wrong_role(&e, ModelRole::Generator));
        };
        if req.max_tokens < 1 {
            return Err(GatewayError::InvalidRequest("max_tokens must be at least 1".into()));
        }
        if !(req.temperature >= 0.0) {
            return Err(GatewayError::InvalidRequest("temperature must be non-negative".into()));
        }
        if let Some(limit) = e.spec.max_context_tokens {
            let prompt_tokens = count_tokens(&req.prompt);
            if prompt_tokens > limit {
                return Err(GatewayError::ContextOverflow { prompt_tokens, max_context_tokens: limit });
            }
        }
        Ok(g.clone())
    }

    pub fn generate(&self, model_id: &str, req: &GenerationRequest) -> Result<String, GatewayError> {
        self.generator(model_id, req)?.generate(req)
    }

    /// Streams the generation as token deltas followed by exactly one `Done`.
    pub fn generate_stream(&self, model_id: &str, req: &GenerationRequest) -> Result<GenerationStream, GatewayError> {
        self.generator(model_id, req)?.generate_stream(req)
    }

    /// Candidate indices sorted by score descending, ties by lower index.
    pub fn rerank(&self, model_id: &str, query: &str, candidates: &[String]) -> Result<Vec<(usize, f32)>, GatewayError> {
        let e = self.entry(model_id)?;
        let ModelHandle::Reranker(r) = &e.handle else {
            return Err(Self::wrong_role(&e, ModelRole::Reranker));
        };
        if candidates.is_empty() {
            return Ok(Vec::new());
        }
        let mut scored = r.score(query, candidates)?;
        let mut seen = vec![false; candidates.len()];
        for (i, _) in &scored {
            if *i >= candidates.len() || std::mem::replace(&mut seen[*i], true) {
                return Err(GatewayError::EndpointError {
                    status: None,
                    attempts: 1,
                    message: format!("reranker returned invalid or repeated index {i}"),
                });
            }
        }
        if scored.len() != candidates.len() {
            return Err(GatewayError::EndpointError {
                status: None,
                attempts: 1,
                message: format!("reranker scored {} of {} candidates", scored.len(), candidates.len()),
            });
        }
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        Ok(scored)
    }
}
