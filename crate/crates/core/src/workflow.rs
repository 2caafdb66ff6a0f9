//! Inference workflows: VanillaRAG and DeepNote.
//!
//! A run produces a [`WorkflowTrace`] and, through an [`EventSink`], a live
//! event stream. The stream carries the trace events in order, except that
//! the final generation arrives as `generation_delta` events whose texts
//! concatenate to the answer; [`collapse_stream`] turns a stream back into
//! trace events.
//!
//! Trace layout:
//! * vanilla: `retrieval, stop(single_pass), generation`
//! * deepnote: `(retrieval, note_update)+, stop(no_new_info|max_iterations), generation`

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{Gateway, GatewayError, GenerationEvent, GenerationRequest};
use crate::knowledge::KnowledgeBase;
use crate::retrieval::{search, search_then_rerank, RetrievalError, SearchBackend, SearchHit};
use crate::templates::{self, format_passages, TemplateError, TemplateSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WorkflowKind {
    Vanilla,
    Deepnote,
}

/// Template roles a config may override through `prompt_template_ids`.
pub const STEP_ANSWER: &str = "answer";
pub const STEP_REVIEW: &str = "review";
pub const STEP_REFINE: &str = "refine";
pub const STEP_FINAL: &str = "final";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkflowConfig {
    pub workflow: WorkflowKind,
    pub kb_id: String,
    /// Must equal the knowledge base's embedder when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedder_id: Option<String>,
    pub generator_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reranker_id: Option<String>,
    #[serde(default = "default_k")]
    pub k: usize,
    /// Candidates handed to the reranker; at least `k`.
    #[serde(default = "default_rerank_depth")]
    pub rerank_depth: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_iterations: Option<usize>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub prompt_template_ids: BTreeMap<String, String>,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_k() -> usize {
    5
}

fn default_rerank_depth() -> usize {
    20
}

fn default_max_tokens() -> usize {
    512
}

pub const DEFAULT_MAX_ITERATIONS: usize = 3;

impl WorkflowConfig {
    pub fn new(workflow: WorkflowKind, kb_id: &str, generator_id: &str) -> Self {
        Self {
            workflow,
            kb_id: kb_id.into(),
            embedder_id: None,
            generator_id: generator_id.into(),
            reranker_id: None,
            k: default_k(),
            rerank_depth: default_rerank_depth(),
            max_iterations: (workflow == WorkflowKind::Deepnote).then_some(DEFAULT_MAX_ITERATIONS),
            prompt_template_ids: BTreeMap::new(),
            temperature: 0.0,
            max_tokens: default_max_tokens(),
            seed: 0,
        }
    }

    /// Parses `workflow.toml`; a deepnote config without `max_iterations`
    /// gets the default.
    pub fn from_toml_str(text: &str) -> Result<Self, WorkflowError> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| WorkflowError::InvalidConfig(e.to_string()))?;
        cfg.fill_defaults();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_file(path: &Path) -> Result<Self, WorkflowError> {
        let text = std::fs::read_to_string(path).map_err(|e| WorkflowError::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn fill_defaults(&mut self) {
        if self.workflow == WorkflowKind::Deepnote && self.max_iterations.is_none() {
            self.max_iterations = Some(DEFAULT_MAX_ITERATIONS);
        }
    }

    pub fn validate(&self) -> Result<(), WorkflowError> {
        let bad = |m: &str| Err(WorkflowError::InvalidConfig(m.into()));
        if self.k == 0 {
            return bad("k must be at least 1");
        }
        if self.kb_id.is_empty() || self.generator_id.is_empty() {
            return bad("kb_id and generator_id are required");
        }
        if self.reranker_id.is_some() && self.rerank_depth < self.k {
            return bad("rerank_depth must be at least k");
        }
        match (self.workflow, self.max_iterations) {
            (WorkflowKind::Deepnote, None) => bad("deepnote requires max_iterations"),
            (WorkflowKind::Deepnote, Some(0)) => bad("max_iterations must be at least 1"),
            _ => Ok(()),
        }
    }

    fn template(&self, step: &str, default: &'static str) -> String {
        self.prompt_template_ids.get(step).cloned().unwrap_or_else(|| default.to_string())
    }

    /// Stable identity of everything that affects a run's output.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        format!("{:016x}", crate::gateway::mock::hash64(&json))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Note {
    pub content: String,
    pub revision: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    NoNewInfo,
    MaxIterations,
    SinglePass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TraceEvent {
    Retrieval { query: String, hits: Vec<SearchHit> },
    NoteUpdate { old_rev: usize, new_rev: usize, accepted: bool, content: String },
    Generation { prompt_id: String, text: String },
    Stop { reason: StopReason },
}

impl TraceEvent {
    pub fn kind(&self) -> &'static str {
        match self {
            TraceEvent::Retrieval { .. } => "retrieval",
            TraceEvent::NoteUpdate { .. } => "note_update",
            TraceEvent::Generation { .. } => "generation",
            TraceEvent::Stop { .. } => "stop",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkflowTrace {
    pub run_id: String,
    pub events: Vec<TraceEvent>,
    pub final_answer: String,
}

impl WorkflowTrace {
    /// Exactly one stop, followed by exactly one generation that ends the
    /// trace and carries the final answer.
    pub fn is_well_formed(&self) -> bool {
        let stops: Vec<usize> =
            self.events.iter().enumerate().filter(|(_, e)| matches!(e, TraceEvent::Stop { .. })).map(|(i, _)| i).collect();
        let [s] = stops[..] else { return false };
        matches!(&self.events[s + 1..], [TraceEvent::Generation { text, .. }] if *text == self.final_answer)
    }

    pub fn kinds(&self) -> Vec<&'static str> {
        self.events.iter().map(TraceEvent::kind).collect()
    }

    pub fn retrievals(&self) -> usize {
        self.events.iter().filter(|e| matches!(e, TraceEvent::Retrieval { .. })).count()
    }
}

/// One streamed event. The SSE event name is [`StreamEvent::name`] and the
/// data line is the JSON of the payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum StreamEvent {
    Retrieval { query: String, hits: Vec<SearchHit> },
    NoteUpdate { old_rev: usize, new_rev: usize, accepted: bool, content: String },
    Stop { reason: StopReason },
    GenerationDelta { prompt_id: String, text: String },
    Done { run_id: String, final_answer: String },
    Error { code: String, message: String },
}

impl StreamEvent {
    pub fn name(&self) -> &'static str {
        match self {
            StreamEvent::Retrieval { .. } => "retrieval",
            StreamEvent::NoteUpdate { .. } => "note_update",
            StreamEvent::Stop { .. } => "stop",
            StreamEvent::GenerationDelta { .. } => "generation_delta",
            StreamEvent::Done { .. } => "done",
            StreamEvent::Error { .. } => "error",
        }
    }

    /// Payload without the `event` tag.
    pub fn data(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("event serializes");
        v.as_object_mut().expect("tagged object").remove("event");
        v
    }

    pub fn from_named(name: &str, data: serde_json::Value) -> Result<Self, serde_json::Error> {
        let mut obj = match data {
            serde_json::Value::Object(m) => m,
            other => serde_json::Map::from_iter([("value".to_string(), other)]),
        };
        obj.insert("event".into(), serde_json::Value::String(name.into()));
        serde_json::from_value(serde_json::Value::Object(obj))
    }

    fn from_trace(e: &TraceEvent) -> Option<Self> {
        Some(match e.clone() {
            TraceEvent::Retrieval { query, hits } => StreamEvent::Retrieval { query, hits },
            TraceEvent::NoteUpdate { old_rev, new_rev, accepted, content } => {
                StreamEvent::NoteUpdate { old_rev, new_rev, accepted, content }
            }
            TraceEvent::Stop { reason } => StreamEvent::Stop { reason },
            TraceEvent::Generation { .. } => return None,
        })
    }
}

/// Rebuilds trace events from a stream: runs of `generation_delta` become
/// one `generation`; `done` and `error` are dropped.
pub fn collapse_stream(events: &[StreamEvent]) -> Vec<TraceEvent> {
    let mut out: Vec<TraceEvent> = Vec::new();
    for e in events {
        match e.clone() {
            StreamEvent::Retrieval { query, hits } => out.push(TraceEvent::Retrieval { query, hits }),
            StreamEvent::NoteUpdate { old_rev, new_rev, accepted, content } => {
                out.push(TraceEvent::NoteUpdate { old_rev, new_rev, accepted, content })
            }
            StreamEvent::Stop { reason } => out.push(TraceEvent::Stop { reason }),
            StreamEvent::GenerationDelta { prompt_id, text } => match out.last_mut() {
                Some(TraceEvent::Generation { prompt_id: p, text: t }) if *p == prompt_id => t.push_str(&text),
                _ => out.push(TraceEvent::Generation { prompt_id, text }),
            },
            StreamEvent::Done { .. } | StreamEvent::Error { .. } => {}
        }
    }
    out
}

#[derive(Debug, Error, PartialEq)]
pub enum WorkflowError {
    #[error("invalid workflow config: {0}")]
    InvalidConfig(String),
    #[error("index of knowledge base {0} is not ready")]
    IndexNotReady(String),
    #[error("reviewer output at iteration {0} lacks a KEEP/UPDATE verdict")]
    MalformedVerdict(usize),
    #[error(transparent)]
    Retrieval(RetrievalError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("trace not found: {0}")]
    TraceNotFound(String),
    #[error("i/o failure: {0}")]
    Io(String),
}

impl From<RetrievalError> for WorkflowError {
    fn from(e: RetrievalError) -> Self {
        match e {
            RetrievalError::IndexNotReady(kb) => WorkflowError::IndexNotReady(kb),
            RetrievalError::Gateway(g) => WorkflowError::Gateway(g),
            other => WorkflowError::Retrieval(other),
        }
    }
}

impl WorkflowError {
    pub fn code(&self) -> &'static str {
        match self {
            WorkflowError::InvalidConfig(_) => "invalid_config",
            WorkflowError::IndexNotReady(_) => "index_not_ready",
            WorkflowError::MalformedVerdict(_) => "malformed_verdict",
            WorkflowError::Retrieval(_) => "retrieval_failed",
            WorkflowError::Gateway(GatewayError::ModelNotFound(_)) => "model_not_found",
            WorkflowError::Gateway(_) => "model_error",
            WorkflowError::Template(_) => "unknown_template",
            WorkflowError::TraceNotFound(_) => "not_found",
            WorkflowError::Io(_) => "io_error",
        }
    }
}

pub type EventSink<'a> = dyn FnMut(&StreamEvent) + 'a;

/// Everything a run reads besides its config.
pub struct RunContext<'a> {
    pub kb: &'a KnowledgeBase,
    pub gw: &'a Gateway,
    pub templates: &'a TemplateSet,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    Update(String),
    Keep,
}

/// First non-empty line must be `VERDICT: UPDATE` or `VERDICT: KEEP`
/// (case-insensitive). The revised note follows a `NOTE:` marker; without
/// one, the rest of the reply is the note.
pub fn parse_verdict(reply: &str) -> Option<Verdict> {
    let mut lines = reply.lines().skip_while(|l| l.trim().is_empty());
    let head = lines.next()?.trim();
    let (tag, value) = head.split_once(':')?;
    if !tag.trim().eq_ignore_ascii_case("verdict") {
        return None;
    }
    match value.trim().to_ascii_uppercase().as_str() {
        "KEEP" => Some(Verdict::Keep),
        "UPDATE" => {
            let rest: Vec<&str> = lines.collect();
            let body = rest.join("\n");
            let note = match body.find("NOTE:") {
                Some(i) => &body[i + "NOTE:".len()..],
                None => body.as_str(),
            };
            Some(Verdict::Update(note.trim().to_string()))
        }
        _ => None,
    }
}

struct Runner<'a, 'b> {
    cfg: &'a WorkflowConfig,
    ctx: &'a RunContext<'a>,
    events: Vec<TraceEvent>,
    sink: &'a mut EventSink<'b>,
}

impl Runner<'_, '_> {
    fn push(&mut self, e: TraceEvent) {
        if let Some(s) = StreamEvent::from_trace(&e) {
            (self.sink)(&s);
        }
        self.events.push(e);
    }

    fn request(&self, prompt: String) -> GenerationRequest {
        GenerationRequest {
            prompt,
            temperature: self.cfg.temperature,
            max_tokens: self.cfg.max_tokens,
            stream: false,
            seed: Some(self.cfg.seed),
        }
    }

    fn retrieve(&mut self, query: &str) -> Result<Vec<SearchHit>, WorkflowError> {
        let (kb, gw) = (self.ctx.kb, self.ctx.gw);
        let hits = match &self.cfg.reranker_id {
            Some(r) => search_then_rerank(kb, gw, query, self.cfg.rerank_depth.min(kb.chunks().len()).max(self.cfg.k), self.cfg.k, r)?,
            None => search(kb, gw, query, self.cfg.k, &SearchBackend::Exact)?,
        };
        self.push(TraceEvent::Retrieval { query: query.to_string(), hits: hits.clone() });
        Ok(hits)
    }

    fn passages(&self, hits: &[SearchHit]) -> String {
        format_passages(
            hits.iter()
                .filter_map(|h| self.ctx.kb.chunk(&h.chunk_id).map(|c| (h.rank, h.chunk_id.as_str(), c.text.as_str()))),
        )
    }

    fn generate(&self, prompt: String) -> Result<String, WorkflowError> {
        Ok(self.ctx.gw.generate(&self.cfg.generator_id, &self.request(prompt))?)
    }

    /// Streams the final generation into the sink and records it.
    fn final_generation(&mut self, prompt_id: String, prompt: String) -> Result<String, WorkflowError> {
        let mut req = self.request(prompt);
        req.stream = true;
        let stream = self.ctx.gw.generate_stream(&self.cfg.generator_id, &req)?;
        let mut text = String::new();
        for ev in stream {
            match ev? {
                GenerationEvent::TokenDelta { text: delta } => {
                    (self.sink)(&StreamEvent::GenerationDelta { prompt_id: prompt_id.clone(), text: delta.clone() });
                    text.push_str(&delta);
                }
                GenerationEvent::Done => break,
            }
        }
        self.events.push(TraceEvent::Generation { prompt_id, text: text.clone() });
        Ok(text)
    }

    fn vanilla(&mut self, query: &str) -> Result<String, WorkflowError> {
        let hits = self.retrieve(query)?;
        let template_id = self.cfg.template(STEP_ANSWER, templates::RAG_ANSWER);
        let prompt = self.ctx.templates.render(&template_id, &[("passages", &self.passages(&hits)), ("query", query)])?;
        self.push(TraceEvent::Stop { reason: StopReason::SinglePass });
        self.final_generation(template_id, prompt)
    }

    fn deepnote(&mut self, query: &str) -> Result<String, WorkflowError> {
        let max = self.cfg.max_iterations.unwrap_or(DEFAULT_MAX_ITERATIONS);
        let review_id = self.cfg.template(STEP_REVIEW, templates::DEEPNOTE_REVIEW);
        let refine_id = self.cfg.template(STEP_REFINE, templates::DEEPNOTE_REFINE);
        let final_id = self.cfg.template(STEP_FINAL, templates::DEEPNOTE_ANSWER);
        let mut note = Note { content: String::new(), revision: 0 };
        let mut current_query = query.to_string();
        let mut reason = StopReason::MaxIterations;
        for i in 1..=max {
            let hits = self.retrieve(&current_query)?;
            let (iteration, max_s, rev) = (i.to_string(), max.to_string(), note.revision.to_string());
            let prompt = self.ctx.templates.render(
                &review_id,
                &[
                    ("iteration", &iteration),
                    ("max_iterations", &max_s),
                    ("query", query),
                    ("revision", &rev),
                    ("note", note_text(&note)),
                    ("passages", &self.passages(&hits)),
                ],
            )?;
            let reply = self.generate(prompt)?;
            match parse_verdict(&reply).ok_or(WorkflowError::MalformedVerdict(i))? {
                Verdict::Keep => {
                    self.push(TraceEvent::NoteUpdate {
                        old_rev: note.revision,
                        new_rev: note.revision,
                        accepted: false,
                        content: note.content.clone(),
                    });
                    reason = StopReason::NoNewInfo;
                    break;
                }
                Verdict::Update(content) => {
                    let old_rev = note.revision;
                    note = Note { content, revision: old_rev + 1 };
                    self.push(TraceEvent::NoteUpdate {
                        old_rev,
                        new_rev: note.revision,
                        accepted: true,
                        content: note.content.clone(),
                    });
                }
            }
            if i < max {
                let prompt = self.ctx.templates.render(
                    &refine_id,
                    &[("iteration", &iteration), ("max_iterations", &max_s), ("query", query), ("note", note_text(&note))],
                )?;
                let refined = self.generate(prompt)?;
                let refined = refined.lines().map(str::trim).find(|l| !l.is_empty()).unwrap_or("");
                if !refined.is_empty() {
                    current_query = refined.to_string();
                }
            }
        }
        self.push(TraceEvent::Stop { reason });
        let prompt = self.ctx.templates.render(&final_id, &[("note", note_text(&note)), ("query", query)])?;
        self.final_generation(final_id, prompt)
    }
}

fn note_text(note: &Note) -> &str {
    if note.content.is_empty() {
        "(empty)"
    } else {
        &note.content
    }
}

fn check_context(cfg: &WorkflowConfig, ctx: &RunContext) -> Result<(), WorkflowError> {
    cfg.validate()?;
    if cfg.kb_id != ctx.kb.kb_id() {
        return Err(WorkflowError::InvalidConfig(format!(
            "config names knowledge base {}, got {}",
            cfg.kb_id,
            ctx.kb.kb_id()
        )));
    }
    if let Some(e) = &cfg.embedder_id {
        if e != ctx.kb.embedder_id() {
            return Err(WorkflowError::InvalidConfig(format!(
                "knowledge base {} was built with embedder {}, config names {e}",
                cfg.kb_id,
                ctx.kb.embedder_id()
            )));
        }
    }
    ctx.kb.ensure_ready().map_err(|_| WorkflowError::IndexNotReady(cfg.kb_id.clone()))?;
    ctx.gw.spec(&cfg.generator_id)?;
    Ok(())
}

/// Runs the configured workflow, feeding events to `sink` as they happen.
/// On failure nothing more is sent to the sink; the caller reports the
/// error.
pub fn execute(
    cfg: &WorkflowConfig,
    ctx: &RunContext,
    query: &str,
    run_id: &str,
    sink: &mut EventSink,
) -> Result<WorkflowTrace, WorkflowError> {
    check_context(cfg, ctx)?;
    let mut runner = Runner { cfg, ctx, events: Vec::new(), sink };
    let answer = match cfg.workflow {
        WorkflowKind::Vanilla => runner.vanilla(query)?,
        WorkflowKind::Deepnote => runner.deepnote(query)?,
    };
    Ok(WorkflowTrace { run_id: run_id.to_string(), events: runner.events, final_answer: answer })
}

pub fn run_vanilla(cfg: &WorkflowConfig, ctx: &RunContext, query: &str, run_id: &str) -> Result<(String, WorkflowTrace), WorkflowError> {
    if cfg.workflow != WorkflowKind::Vanilla {
        return Err(WorkflowError::InvalidConfig("config is not a vanilla workflow".into()));
    }
    let trace = execute(cfg, ctx, query, run_id, &mut |_| {})?;
    Ok((trace.final_answer.clone(), trace))
}

pub fn run_deepnote(cfg: &WorkflowConfig, ctx: &RunContext, query: &str, run_id: &str) -> Result<(String, WorkflowTrace), WorkflowError> {
    if cfg.workflow != WorkflowKind::Deepnote {
        return Err(WorkflowError::InvalidConfig("config is not a deepnote workflow".into()));
    }
    let trace = execute(cfg, ctx, query, run_id, &mut |_| {})?;
    Ok((trace.final_answer.clone(), trace))
}

/// Streaming run: every event goes to `sink`, ending with `done`, or with
/// a single `error` event on failure. With a store, the trace is persisted
/// before `done` is sent; failed runs persist nothing.
pub fn stream_run(
    cfg: &WorkflowConfig,
    ctx: &RunContext,
    query: &str,
    run_id: &str,
    store: Option<&TraceStore>,
    sink: &mut EventSink,
) -> Result<WorkflowTrace, WorkflowError> {
    let result = execute(cfg, ctx, query, run_id, sink).and_then(|trace| match store {
        Some(s) => s.save(&trace).map(|_| trace),
        None => Ok(trace),
    });
    match result {
        Ok(trace) => {
            sink(&StreamEvent::Done { run_id: trace.run_id.clone(), final_answer: trace.final_answer.clone() });
            Ok(trace)
        }
        Err(e) => {
            sink(&StreamEvent::Error { code: e.code().into(), message: e.to_string() });
            Err(e)
        }
    }
}

pub fn new_run_id() -> String {
    uuid::Uuid::new_v4().to_string()
}

/// Traces persisted as `<dir>/<run_id>.jsonl`, one event per line.
#[derive(Debug, Clone)]
pub struct TraceStore {
    dir: PathBuf,
}

impl TraceStore {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    fn path(&self, run_id: &str) -> Result<PathBuf, WorkflowError> {
        if run_id.is_empty() || !run_id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
            return Err(WorkflowError::TraceNotFound(run_id.to_string()));
        }
        Ok(self.dir.join(format!("{run_id}.jsonl")))
    }

    pub fn to_jsonl(trace: &WorkflowTrace) -> String {
        let mut out = String::new();
        for e in &trace.events {
            out.push_str(&serde_json::to_string(e).expect("event serializes"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, trace: &WorkflowTrace) -> Result<PathBuf, WorkflowError> {
        let path = self.path(&trace.run_id)?;
        let io = |e: std::io::Error| WorkflowError::Io(format!("{}: {e}", path.display()));
        std::fs::create_dir_all(&self.dir).map_err(io)?;
        let tmp = path.with_extension("jsonl.tmp");
        let mut f = std::fs::File::create(&tmp).map_err(io)?;
        f.write_all(Self::to_jsonl(trace).as_bytes()).map_err(io)?;
        f.sync_all().map_err(io)?;
        std::fs::rename(&tmp, &path).map_err(io)?;
        Ok(path)
    }

    pub fn load(&self, run_id: &str) -> Result<WorkflowTrace, WorkflowError> {
        let path = self.path(run_id)?;
        let text = std::fs::read_to_string(&path).map_err(|_| WorkflowError::TraceNotFound(run_id.to_string()))?;
        let events: Vec<TraceEvent> = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<_, _>>()
            .map_err(|e| WorkflowError::Io(format!("{}: {e}", path.display())))?;
        let final_answer = match events.last() {
            Some(TraceEvent::Generation { text, .. }) => text.clone(),
            _ => String::new(),
        };
        Ok(WorkflowTrace { run_id: run_id.to_string(), events, final_answer })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn verdict_parsing() {
        assert_eq!(parse_verdict("VERDICT: KEEP"), Some(Verdict::Keep));
        assert_eq!(parse_verdict("\nverdict: update\nNOTE: a\nb"), Some(Verdict::Update("a\nb".into())));
        assert_eq!(parse_verdict("VERDICT: UPDATE\nplain note"), Some(Verdict::Update("plain note".into())));
        assert_eq!(parse_verdict("I think we should update"), None);
        assert_eq!(parse_verdict("VERDICT: MAYBE"), None);
        assert_eq!(parse_verdict(""), None);
    }

    #[test]
    fn config_validation() {
        let mut c = WorkflowConfig::new(WorkflowKind::Vanilla, "kb", "gen");
        assert!(c.validate().is_ok());
        c.k = 0;
        assert!(matches!(c.validate(), Err(WorkflowError::InvalidConfig(_))));
        let mut d = WorkflowConfig::new(WorkflowKind::Deepnote, "kb", "gen");
        assert_eq!(d.max_iterations, Some(3));
        d.max_iterations = None;
        assert!(d.validate().is_err());
        let parsed = WorkflowConfig::from_toml_str("workflow = \"deepnote\"\nkb_id = \"kb\"\ngenerator_id = \"g\"\n").unwrap();
        assert_eq!(parsed.max_iterations, Some(3));
        assert_eq!(parsed.k, 5);
        assert!(WorkflowConfig::from_toml_str("workflow = \"vanilla\"\nkb_id = \"kb\"\ngenerator_id = \"g\"\nk = 0\n").is_err());
    }

    #[test]
    fn stream_events_round_trip() {
        let e = StreamEvent::GenerationDelta { prompt_id: "p".into(), text: "hi ".into() };
        assert_eq!(e.data(), serde_json::json!({"prompt_id": "p", "text": "hi "}));
        assert_eq!(StreamEvent::from_named(e.name(), e.data()).unwrap(), e);
        let collapsed = collapse_stream(&[
            StreamEvent::Stop { reason: StopReason::SinglePass },
            e.clone(),
            StreamEvent::GenerationDelta { prompt_id: "p".into(), text: "there".into() },
            StreamEvent::Done { run_id: "r".into(), final_answer: "hi there".into() },
        ]);
        assert_eq!(
            collapsed,
            vec![
                TraceEvent::Stop { reason: StopReason::SinglePass },
                TraceEvent::Generation { prompt_id: "p".into(), text: "hi there".into() }
            ]
        );
    }

    #[test]
    fn well_formed_traces() {
        let g = TraceEvent::Generation { prompt_id: "p".into(), text: "a".into() };
        let s = TraceEvent::Stop { reason: StopReason::SinglePass };
        let t = WorkflowTrace { run_id: "r".into(), events: vec![s.clone(), g.clone()], final_answer: "a".into() };
        assert!(t.is_well_formed());
        let t2 = WorkflowTrace { events: vec![g, s], ..t.clone() };
        assert!(!t2.is_well_formed());
    }

    #[test]
    fn trace_store_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let store = TraceStore::new(dir.path());
        let t = WorkflowTrace {
            run_id: "run-1".into(),
            events: vec![
                TraceEvent::Retrieval {
                    query: "q".into(),
                    hits: vec![SearchHit { chunk_id: "d#0".into(), score: 0.5, rank: 1 }],
                },
                TraceEvent::Stop { reason: StopReason::SinglePass },
                TraceEvent::Generation { prompt_id: "rag_answer.v1".into(), text: "ans".into() },
            ],
            final_answer: "ans".into(),
        };
        store.save(&t).unwrap();
        assert_eq!(store.load("run-1").unwrap(), t);
        assert!(matches!(store.load("../etc"), Err(WorkflowError::TraceNotFound(_))));
        assert!(matches!(store.load("missing"), Err(WorkflowError::TraceNotFound(_))));
    }
}
