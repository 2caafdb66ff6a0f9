//! Training-data construction from a knowledge base.
//!
//! * query synthesis: one generator call per sampled chunk and query slot
//! * hard negatives: exact-search hits inside a rank window, minus positives
//! * preference pairs: several sampled answers per question, scored with a
//!   rule-based reward; best versus worst becomes a DPO pair
//! * KBAlign-style SFT: short-range Q/A from one chunk, long-range Q/A over
//!   chunks from distinct documents
//!
//! All sampling is seeded from [`SynthesisConfig::seed`], and generation
//! calls run on a worker pool whose results are assembled in input order,
//! so two runs with the same inputs produce identical records.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{
    write_records_to, AnnotationRange, Metadata, PreferencePair, QAExample, RetrievalPairExample, SFTExample,
};
use crate::gateway::{Gateway, GatewayError, GenerationRequest};
use crate::knowledge::KnowledgeBase;
use crate::metrics::rouge_l_max;
use crate::parallel::ordered_map;
use crate::retrieval::{search, RetrievalError, SearchBackend};
use crate::templates::{self, format_passages, TemplateError, TemplateSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardFn {
    RougeL,
    KeypointRecall,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthesisConfig {
    pub queries_per_chunk: usize,
    /// When set, only `ceil(target_samples / queries_per_chunk)` chunks are
    /// sampled for query synthesis.
    pub target_samples: Option<usize>,
    pub negative_window: [usize; 2],
    pub negatives_per_query: usize,
    pub reward_fn: RewardFn,
    pub samples_per_query: usize,
    pub temperatures: Vec<f64>,
    pub reward_gap_min: f64,
    pub seed: u64,
    /// Passages placed in the answer prompt of preference sampling.
    pub retrieval_k: usize,
    pub short_range: usize,
    pub long_range: usize,
    pub max_tokens: usize,
    pub workers: usize,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            queries_per_chunk: 1,
            target_samples: None,
            negative_window: [2, 30],
            negatives_per_query: 7,
            reward_fn: RewardFn::RougeL,
            samples_per_query: 4,
            temperatures: vec![0.7],
            reward_gap_min: 0.05,
            seed: 0,
            retrieval_k: 5,
            short_range: 0,
            long_range: 0,
            max_tokens: 512,
            workers: 4,
        }
    }
}

impl SynthesisConfig {
    pub fn from_toml_file(path: &Path) -> Result<Self, SynthError> {
        let text = std::fs::read_to_string(path).map_err(|e| SynthError::Io(format!("{}: {e}", path.display())))?;
        let cfg: Self = toml::from_str(&text).map_err(|e| SynthError::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidConfig(m));
        if self.queries_per_chunk < 1 {
            return bad("queries_per_chunk must be at least 1".into());
        }
        let [lo, hi] = self.negative_window;
        if lo < 2 || hi < lo {
            return bad(format!("negative_window [{lo}, {hi}] needs 2 <= rank_lo <= rank_hi"));
        }
        if self.samples_per_query < 2 {
            return bad("samples_per_query must be at least 2".into());
        }
        if self.temperatures.is_empty()
            || (self.temperatures.len() != 1 && self.temperatures.len() != self.samples_per_query)
        {
            return bad(format!(
                "temperatures must hold one value or samples_per_query ({}) values",
                self.samples_per_query
            ));
        }
        if self.temperatures.iter().any(|t| !(*t >= 0.0)) {
            return bad("temperatures must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.reward_gap_min) {
            return bad("reward_gap_min must lie in [0, 1]".into());
        }
        if self.max_tokens < 1 || self.retrieval_k < 1 {
            return bad("max_tokens and retrieval_k must be at least 1".into());
        }
        Ok(())
    }

    pub fn temperature(&self, sample: usize) -> f64 {
        if self.temperatures.len() == 1 {
            self.temperatures[0]
        } else {
            self.temperatures[sample]
        }
    }
}

/// Chunks needed to reach `target` queries at `queries_per_chunk` each.
pub fn chunks_needed(target: usize, queries_per_chunk: usize) -> usize {
    target.div_ceil(queries_per_chunk.max(1))
}

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("generator unavailable: {0}")]
    GeneratorUnavailable(String),
    #[error("empty generation for chunk {chunk_id} (attempt {attempt})")]
    EmptyGeneration { chunk_id: String, attempt: usize },
    #[error("example {0} has no gold answer")]
    NoGoldAnswer(String),
    #[error("insufficient corpus: {0}")]
    InsufficientCorpus(String),
    #[error("index of knowledge base {0} is not ready")]
    IndexNotReady(String),
    #[error("invalid synthesis config: {0}")]
    InvalidConfig(String),
    #[error("records of different kinds cannot be exported together: {0}")]
    MixedRecordKinds(String),
    #[error("unresolvable chunk ids: {}", .0.join(", "))]
    UnresolvedChunks(Vec<String>),
    #[error("i/o failure: {0}")]
    Io(String),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Retrieval(RetrievalError),
}

impl From<RetrievalError> for SynthError {
    fn from(e: RetrievalError) -> Self {
        match e {
            RetrievalError::IndexNotReady(kb) => SynthError::IndexNotReady(kb),
            other => SynthError::Retrieval(other),
        }
    }
}

fn gen_err(e: GatewayError) -> SynthError {
    SynthError::GeneratorUnavailable(e.to_string())
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Generation helper shared by the builders.
struct Gen<'a> {
    gw: &'a Gateway,
    model: &'a str,
    max_tokens: usize,
}

impl Gen<'_> {
    fn call(&self, prompt: String, temperature: f64, seed: u64) -> Result<String, SynthError> {
        let req = GenerationRequest { prompt, temperature, max_tokens: self.max_tokens, stream: false, seed: Some(seed) };
        self.gw.generate(self.model, &req).map_err(gen_err)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesizedQuery {
    pub query: String,
    pub source_chunk_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuerySynthesis {
    pub pairs: Vec<SynthesizedQuery>,
    pub chunks_sampled: usize,
    pub duplicates_removed: usize,
    pub template_id: String,
}

fn first_line(text: &str) -> String {
    text.lines().map(str::trim).find(|l| !l.is_empty()).unwrap_or("").to_string()
}

/// Chunk positions chosen for query synthesis, in knowledge-base order.
pub fn sample_chunk_positions(n_chunks: usize, cfg: &SynthesisConfig) -> Vec<usize> {
    match cfg.target_samples {
        None => (0..n_chunks).collect(),
        Some(target) => {
            let want = chunks_needed(target, cfg.queries_per_chunk).min(n_chunks);
            let mut rng = rng_for(cfg.seed, 1);
            let mut picked = rand::seq::index::sample(&mut rng, n_chunks, want).into_vec();
            picked.sort_unstable();
            picked
        }
    }
}

/// Writes `queries_per_chunk` queries for each sampled chunk; the source
/// chunk is the positive. Exact duplicate queries keep their first
/// occurrence.
pub fn synthesize_queries(
    kb: &KnowledgeBase,
    gw: &Gateway,
    generator_id: &str,
    cfg: &SynthesisConfig,
    templates: &TemplateSet,
) -> Result<QuerySynthesis, SynthError> {
    cfg.validate()?;
    kb.ensure_ready().map_err(|_| SynthError::IndexNotReady(kb.kb_id().to_string()))?;
    gw.spec(generator_id).map_err(gen_err)?;
    let positions = sample_chunk_positions(kb.chunks().len(), cfg);
    let jobs: Vec<(usize, usize)> =
        positions.iter().flat_map(|&p| (0..cfg.queries_per_chunk).map(move |j| (p, j))).collect();
    let gen = Gen { gw, model: generator_id, max_tokens: cfg.max_tokens };
    let results = ordered_map(&jobs, cfg.workers, |_, &(pos, j)| -> Result<SynthesizedQuery, SynthError> {
        let chunk = &kb.chunks()[pos];
        let prompt = templates.render(templates::QUERY_WRITER, &[("passage", &chunk.text)])?;
        let seed = cfg.seed.wrapping_add(j as u64);
        let query = first_line(&gen.call(prompt, cfg.temperature(0), seed)?);
        if query.is_empty() {
            return Err(SynthError::EmptyGeneration { chunk_id: chunk.chunk_id.clone(), attempt: j + 1 });
        }
        Ok(SynthesizedQuery { query, source_chunk_id: chunk.chunk_id.clone() })
    });
    let mut seen = HashSet::new();
    let mut pairs = Vec::new();
    let mut duplicates_removed = 0;
    for r in results {
        let q = r?;
        if seen.insert(q.query.clone()) {
            pairs.push(q);
        } else {
            duplicates_removed += 1;
        }
    }
    Ok(QuerySynthesis {
        pairs,
        chunks_sampled: positions.len(),
        duplicates_removed,
        template_id: templates::QUERY_WRITER.to_string(),
    })
}

/// Candidate negatives for one query: hits ranked within
/// `[rank_lo, rank_hi]` (1-based, original ranks) that are not positives.
pub fn negative_candidates(ranked: &[String], positives: &HashSet<&str>, window: [usize; 2]) -> Vec<String> {
    let [lo, hi] = window;
    ranked
        .iter()
        .enumerate()
        .filter(|(i, id)| (lo..=hi).contains(&(i + 1)) && !positives.contains(id.as_str()))
        .map(|(_, id)| id.clone())
        .collect()
}

/// Draws `negatives_per_query` candidates uniformly without replacement,
/// keeping rank order; takes all when fewer are available.
pub fn sample_negatives(candidates: &[String], n: usize, seed: u64, query_index: usize) -> Vec<String> {
    if candidates.len() <= n {
        return candidates.to_vec();
    }
    let mut rng = rng_for(seed, 2 + query_index as u64);
    let mut idx = rand::seq::index::sample(&mut rng, candidates.len(), n).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| candidates[i].clone()).collect()
}

/// Mines hard negatives for `(query, positives)` pairs by exact search.
pub fn mine_hard_negatives(
    kb: &KnowledgeBase,
    gw: &Gateway,
    pairs: &[(String, Vec<String>)],
    cfg: &SynthesisConfig,
) -> Result<Vec<RetrievalPairExample>, SynthError> {
    cfg.validate()?;
    kb.ensure_ready().map_err(|_| SynthError::IndexNotReady(kb.kb_id().to_string()))?;
    let rank_hi = cfg.negative_window[1];
    let results = ordered_map(pairs, cfg.workers, |i, (query, positives)| -> Result<RetrievalPairExample, SynthError> {
        let hits = search(kb, gw, query, rank_hi, &SearchBackend::Exact)?;
        let ranked: Vec<String> = hits.into_iter().map(|h| h.chunk_id).collect();
        let pos: HashSet<&str> = positives.iter().map(String::as_str).collect();
        let candidates = negative_candidates(&ranked, &pos, cfg.negative_window);
        let negatives = sample_negatives(&candidates, cfg.negatives_per_query, cfg.seed, i);
        let mut metadata = Metadata::new();
        metadata.insert("negative_window".into(), format!("{}-{}", cfg.negative_window[0], cfg.negative_window[1]));
        Ok(RetrievalPairExample {
            query: query.clone(),
            positive_chunk_ids: positives.clone(),
            negative_chunk_ids: negatives,
            metadata,
        })
    });
    results.into_iter().collect()
}

/// Fraction of keypoints contained in the response, case-folded.
pub fn keypoint_recall(response: &str, keypoints: &[String]) -> f64 {
    if keypoints.is_empty() {
        return 0.0;
    }
    let r = response.to_lowercase();
    keypoints.iter().filter(|k| r.contains(&k.to_lowercase())).count() as f64 / keypoints.len() as f64
}

pub fn reward(reward_fn: RewardFn, response: &str, example: &QAExample) -> f64 {
    match reward_fn {
        RewardFn::RougeL => rouge_l_max(response, &example.answers),
        RewardFn::KeypointRecall => keypoint_recall(response, example.effective_keypoints()),
    }
}

/// `(chosen, rejected)` indices: argmax and argmin, earliest index on ties.
pub fn select_preference(rewards: &[f64]) -> Option<(usize, usize)> {
    if rewards.is_empty() {
        return None;
    }
    let mut best = 0;
    let mut worst = 0;
    for (i, r) in rewards.iter().enumerate() {
        if *r > rewards[best] {
            best = i;
        }
        if *r < rewards[worst] {
            worst = i;
        }
    }
    Some((best, worst))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DdrOutcome {
    pub pairs: Vec<PreferencePair>,
    pub skipped_small_gap: usize,
    pub template_id: String,
}

/// Samples `samples_per_query` answers per question from a retrieval
/// prompt and keeps best-versus-worst pairs whose reward gap reaches
/// `reward_gap_min`.
pub fn build_ddr_preferences(
    kb: &KnowledgeBase,
    gw: &Gateway,
    qa: &[QAExample],
    generator_id: &str,
    cfg: &SynthesisConfig,
    templates: &TemplateSet,
) -> Result<DdrOutcome, SynthError> {
    cfg.validate()?;
    if let Some(ex) = qa.iter().find(|e| e.answers.is_empty()) {
        return Err(SynthError::NoGoldAnswer(ex.example_id.clone()));
    }
    kb.ensure_ready().map_err(|_| SynthError::IndexNotReady(kb.kb_id().to_string()))?;
    gw.spec(generator_id).map_err(gen_err)?;
    let gen = Gen { gw, model: generator_id, max_tokens: cfg.max_tokens };
    let results = ordered_map(qa, cfg.workers, |_, ex| -> Result<Option<PreferencePair>, SynthError> {
        let hits = search(kb, gw, &ex.query, cfg.retrieval_k, &SearchBackend::Exact)?;
        let passages = format_passages(
            hits.iter().filter_map(|h| kb.chunk(&h.chunk_id).map(|c| (h.rank, h.chunk_id.as_str(), c.text.as_str()))),
        );
        let prompt = templates.render(templates::RAG_ANSWER, &[("passages", &passages), ("query", &ex.query)])?;
        let mut samples = Vec::with_capacity(cfg.samples_per_query);
        for j in 0..cfg.samples_per_query {
            samples.push(gen.call(prompt.clone(), cfg.temperature(j), cfg.seed.wrapping_add(j as u64))?);
        }
        let rewards: Vec<f64> = samples.iter().map(|s| reward(cfg.reward_fn, s, ex)).collect();
        let (c, r) = select_preference(&rewards).expect("at least two samples");
        if rewards[c] - rewards[r] < cfg.reward_gap_min {
            return Ok(None);
        }
        let mut metadata = Metadata::new();
        metadata.insert("example_id".into(), ex.example_id.clone());
        metadata.insert("template_id".into(), templates::RAG_ANSWER.into());
        metadata.insert("chosen_sample".into(), c.to_string());
        metadata.insert("rejected_sample".into(), r.to_string());
        Ok(Some(PreferencePair {
            prompt,
            chosen: samples[c].clone(),
            rejected: samples[r].clone(),
            chosen_reward: rewards[c],
            rejected_reward: rewards[r],
            metadata,
        }))
    });
    let mut pairs = Vec::new();
    let mut skipped_small_gap = 0;
    for r in results {
        match r? {
            Some(p) => pairs.push(p),
            None => skipped_small_gap += 1,
        }
    }
    Ok(DdrOutcome { pairs, skipped_small_gap, template_id: templates::RAG_ANSWER.to_string() })
}

/// Splits a `Q: ... / A: ...` reply. Multi-line answers are kept whole.
pub fn parse_qa_reply(text: &str) -> Option<(String, String)> {
    let mut q = None;
    let mut a_lines: Vec<&str> = Vec::new();
    let mut in_answer = false;
    for line in text.lines() {
        let t = line.trim();
        if !in_answer {
            if let Some(rest) = t.strip_prefix("Q:") {
                q = Some(rest.trim().to_string());
            } else if let Some(rest) = t.strip_prefix("A:") {
                in_answer = true;
                a_lines.push(rest.trim());
            }
        } else {
            a_lines.push(line);
        }
    }
    let a = a_lines.join("\n").trim().to_string();
    match q {
        Some(q) if !q.is_empty() && !a.is_empty() => Some((q, a)),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KbAlignOutcome {
    pub examples: Vec<SFTExample>,
    /// Replies that did not follow the `Q:` / `A:` format.
    pub unparsed: usize,
    pub warnings: Vec<String>,
}

/// Source chunk groups for KBAlign annotation, a pure function of the
/// knowledge base and the seed.
pub fn kbalign_plan(kb: &KnowledgeBase, cfg: &SynthesisConfig) -> Result<(Vec<Vec<usize>>, Vec<String>), SynthError> {
    let n = kb.chunks().len();
    let mut warnings = Vec::new();
    let mut groups = Vec::new();
    if cfg.short_range > 0 {
        if n == 0 {
            return Err(SynthError::InsufficientCorpus("short-range annotation needs at least one chunk".into()));
        }
        let mut rng = rng_for(cfg.seed, 3);
        let mut order: Vec<usize> = Vec::new();
        while groups.len() < cfg.short_range {
            if order.is_empty() {
                order = (0..n).collect();
                order.shuffle(&mut rng);
                order.reverse();
            }
            groups.push(vec![order.pop().expect("non-empty")]);
        }
    }
    if cfg.long_range > 0 {
        if n < 2 {
            return Err(SynthError::InsufficientCorpus(format!("long-range annotation needs at least 2 chunks, found {n}")));
        }
        let mut by_doc: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, c) in kb.chunks().iter().enumerate() {
            by_doc.entry(c.doc_id.as_str()).or_default().push(i);
        }
        let docs: Vec<&Vec<usize>> = by_doc.values().collect();
        let mut rng = rng_for(cfg.seed, 4);
        if docs.len() < 2 {
            warnings.push(format!(
                "knowledge base {} has a single document; long-range groups use distinct chunks of it",
                kb.kb_id()
            ));
        }
        for _ in 0..cfg.long_range {
            let pool = if docs.len() >= 2 { docs.len() } else { n };
            let size = rng.random_range(2..=3).min(pool);
            let picked = rand::seq::index::sample(&mut rng, pool, size).into_vec();
            let group: Vec<usize> = if docs.len() >= 2 {
                picked.iter().map(|&d| docs[d][rng.random_range(0..docs[d].len())]).collect()
            } else {
                picked
            };
            groups.push(group);
        }
    }
    Ok((groups, warnings))
}

pub fn build_kbalign_sft(
    kb: &KnowledgeBase,
    gw: &Gateway,
    generator_id: &str,
    cfg: &SynthesisConfig,
    templates: &TemplateSet,
) -> Result<KbAlignOutcome, SynthError> {
    cfg.validate()?;
    gw.spec(generator_id).map_err(gen_err)?;
    let (groups, warnings) = kbalign_plan(kb, cfg)?;
    let gen = Gen { gw, model: generator_id, max_tokens: cfg.max_tokens };
    let results = ordered_map(&groups, cfg.workers, |i, group| -> Result<Option<SFTExample>, SynthError> {
        let range = if i < cfg.short_range { AnnotationRange::Short } else { AnnotationRange::Long };
        let chunks: Vec<_> = group.iter().map(|&p| &kb.chunks()[p]).collect();
        let (template_id, prompt) = match range {
            AnnotationRange::Short => {
                (templates::KBALIGN_SHORT, templates.render(templates::KBALIGN_SHORT, &[("passage", &chunks[0].text)])?)
            }
            AnnotationRange::Long => {
                let passages = format_passages(chunks.iter().enumerate().map(|(k, c)| (k + 1, c.chunk_id.as_str(), c.text.as_str())));
                (templates::KBALIGN_LONG, templates.render(templates::KBALIGN_LONG, &[("passages", &passages)])?)
            }
        };
        let reply = gen.call(prompt, cfg.temperature(0), cfg.seed.wrapping_add(i as u64))?;
        Ok(parse_qa_reply(&reply).map(|(q, a)| {
            let mut metadata = Metadata::new();
            metadata.insert(
                "annotation_range".into(),
                match range {
                    AnnotationRange::Short => "short".into(),
                    AnnotationRange::Long => "long".into(),
                },
            );
            metadata.insert("source_chunk_ids".into(), chunks.iter().map(|c| c.chunk_id.as_str()).collect::<Vec<_>>().join(","));
            metadata.insert("template_id".into(), template_id.into());
            SFTExample { prompt: q, response: a, annotation_range: range, metadata }
        }))
    });
    let mut examples = Vec::new();
    let mut unparsed = 0;
    for r in results {
        match r? {
            Some(e) => examples.push(e),
            None => unparsed += 1,
        }
    }
    Ok(KbAlignOutcome { examples, unparsed, warnings })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExportFormat {
    DpoJsonl,
    SftJsonl,
    RetrievalJsonl,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrainingRecord {
    Preference(PreferencePair),
    Sft(SFTExample),
    RetrievalPair(RetrievalPairExample),
}

#[derive(Serialize)]
struct DpoLine<'a> {
    prompt: &'a str,
    chosen: &'a str,
    rejected: &'a str,
}

#[derive(Serialize)]
struct SftLine<'a> {
    prompt: &'a str,
    response: &'a str,
}

#[derive(Serialize)]
struct RetrievalLine<'a> {
    query: &'a str,
    pos: Vec<&'a str>,
    neg: Vec<&'a str>,
}

/// Renders trainer-ready JSONL lines. Retrieval records have their chunk
/// texts inlined from `kb`.
pub fn render_training_lines(
    records: &[TrainingRecord],
    format: ExportFormat,
    kb: Option<&KnowledgeBase>,
) -> Result<Vec<String>, SynthError> {
    let mut lines = Vec::with_capacity(records.len());
    let mut unresolved = Vec::new();
    for (i, r) in records.iter().enumerate() {
        let line = match (format, r) {
            (ExportFormat::DpoJsonl, TrainingRecord::Preference(p)) => {
                serde_json::to_string(&DpoLine { prompt: &p.prompt, chosen: &p.chosen, rejected: &p.rejected })
            }
            (ExportFormat::SftJsonl, TrainingRecord::Sft(s)) => {
                serde_json::to_string(&SftLine { prompt: &s.prompt, response: &s.response })
            }
            (ExportFormat::RetrievalJsonl, TrainingRecord::RetrievalPair(p)) => {
                let kb = kb.ok_or_else(|| SynthError::InvalidConfig("retrieval export needs a knowledge base".into()))?;
                let mut resolve = |ids: &[String]| -> Vec<&str> {
                    ids.iter()
                        .filter_map(|id| match kb.chunk(id) {
                            Some(c) => Some(c.text.as_str()),
                            None => {
                                unresolved.push(id.clone());
                                None
                            }
                        })
                        .collect()
                };
                let pos = resolve(&p.positive_chunk_ids);
                let neg = resolve(&p.negative_chunk_ids);
                serde_json::to_string(&RetrievalLine { query: &p.query, pos, neg })
            }
            (f, _) => return Err(SynthError::MixedRecordKinds(format!("record {i} does not match export format {f:?}"))),
        };
        lines.push(line.expect("training line serialization"));
    }
    if !unresolved.is_empty() {
        return Err(SynthError::UnresolvedChunks(unresolved));
    }
    Ok(lines)
}

/// Writes trainer-ready JSONL and returns the line count.
pub fn export_training_files(
    records: &[TrainingRecord],
    format: ExportFormat,
    path: &Path,
    kb: Option<&KnowledgeBase>,
) -> Result<usize, SynthError> {
    let lines = render_training_lines(records, format, kb)?;
    let values: Vec<serde_json::Value> =
        lines.iter().map(|l| serde_json::from_str(l).expect("rendered line is JSON")).collect();
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| SynthError::Io(e.to_string()))?;
    }
    let file = std::fs::File::create(path).map_err(|e| SynthError::Io(format!("{}: {e}", path.display())))?;
    write_records_to(&values, std::io::BufWriter::new(file)).map_err(|e| SynthError::Io(e.to_string()))
}

/// Checks one exported line against its format's schema: exactly the
/// expected keys, with string (or string-array) values.
pub fn validate_export_line(line: &str, format: ExportFormat) -> Result<(), String> {
    let v: serde_json::Value = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let obj = v.as_object().ok_or("not an object")?;
    let (strings, arrays): (&[&str], &[&str]) = match format {
        ExportFormat::DpoJsonl => (&["prompt", "chosen", "rejected"], &[]),
        ExportFormat::SftJsonl => (&["prompt", "response"], &[]),
        ExportFormat::RetrievalJsonl => (&["query"], &["pos", "neg"]),
    };
    if obj.len() != strings.len() + arrays.len() {
        return Err(format!("expected {} keys, found {}", strings.len() + arrays.len(), obj.len()));
    }
    for k in strings {
        if !obj.get(*k).is_some_and(|x| x.is_string()) {
            return Err(format!("`{k}` must be a string"));
        }
    }
    for k in arrays {
        let ok = obj.get(*k).and_then(|x| x.as_array()).is_some_and(|a| a.iter().all(|x| x.is_string()));
        if !ok {
            return Err(format!("`{k}` must be an array of strings"));
        }
    }
    Ok(())
}

/// Shuffled union of datasets where source `i` contributes
/// `floor(weight_i / sum(weights) * total)` records; sources smaller than
/// their quota are repeated.
pub fn mix<T: Clone>(datasets: &[Vec<T>], weights: &[f64], total: usize, seed: u64) -> Result<Vec<T>, SynthError> {
    if datasets.len() != weights.len() || datasets.is_empty() {
        return Err(SynthError::InvalidConfig("mix needs one weight per dataset".into()));
    }
    let sum: f64 = weights.iter().sum();
    if weights.iter().any(|w| !(*w >= 0.0)) || sum <= 0.0 {
        return Err(SynthError::InvalidConfig("mix weights must be non-negative with a positive sum".into()));
    }
    let mut rng = rng_for(seed, 5);
    let mut out = Vec::new();
    for (ds, w) in datasets.iter().zip(weights) {
        let quota = (w / sum * total as f64 + 1e-9).floor() as usize;
        if quota == 0 {
            continue;
        }
        if ds.is_empty() {
            return Err(SynthError::InvalidConfig("cannot draw from an empty dataset".into()));
        }
        let mut order: Vec<usize> = Vec::new();
        for _ in 0..quota {
            if order.is_empty() {
                order = (0..ds.len()).collect();
                order.shuffle(&mut rng);
            }
            out.push(ds[order.pop().expect("non-empty")].clone());
        }
    }
    out.shuffle(&mut rng);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plan_for_legal_target() {
        assert_eq!(chunks_needed(2800, 1), 2800);
        assert_eq!(chunks_needed(2800, 3), 934);
        assert_eq!(chunks_needed(2800, 4), 700);
    }

    #[test]
    fn config_checks() {
        let mut c = SynthesisConfig::default();
        assert!(c.validate().is_ok());
        c.negative_window = [1, 5];
        assert!(c.validate().is_err());
        c = SynthesisConfig { samples_per_query: 3, temperatures: vec![0.1, 0.2], ..Default::default() };
        assert!(c.validate().is_err());
        c.temperatures = vec![0.1, 0.2, 0.3];
        assert!(c.validate().is_ok());
        assert_eq!(c.temperature(2), 0.3);
    }

    #[test]
    fn config_from_toml() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("synth.toml");
        std::fs::write(&p, "seed = 9\nnegative_window = [3, 10]\nreward_fn = \"keypoint_recall\"\n").unwrap();
        let c = SynthesisConfig::from_toml_file(&p).unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.negative_window, [3, 10]);
        assert_eq!(c.reward_fn, RewardFn::KeypointRecall);
        assert_eq!(c.negatives_per_query, 7);
    }

    #[test]
    fn window_excludes_positive() {
        let ranked: Vec<String> = ["d3", "d7", "d1", "d9", "d2"].iter().map(|s| s.to_string()).collect();
        let pos: HashSet<&str> = ["d3"].into_iter().collect();
        let cands = negative_candidates(&ranked, &pos, [2, 5]);
        assert_eq!(cands, vec!["d7", "d1", "d9", "d2"]);
        for seed in 0..50 {
            let neg = sample_negatives(&cands, 2, seed, 0);
            assert_eq!(neg.len(), 2);
            assert!(neg.iter().all(|n| cands.contains(n) && n != "d3"));
            assert_ne!(neg[0], neg[1]);
        }
        // positive outside the window leaves the window unchanged
        let pos: HashSet<&str> = ["zz"].into_iter().collect();
        assert_eq!(negative_candidates(&ranked, &pos, [2, 5]).len(), 4);
        // tiny corpus
        let two: Vec<String> = vec!["a".into(), "b".into()];
        assert_eq!(negative_candidates(&two, &HashSet::new(), [2, 30]), vec!["b"]);
    }

    #[test]
    fn preference_selection() {
        assert_eq!(select_preference(&[0.8, 0.3, 0.5]), Some((0, 1)));
        assert_eq!(select_preference(&[0.6, 0.6, 0.2]), Some((0, 2)));
        assert_eq!(select_preference(&[0.4, 0.4]), Some((0, 0)));
    }

    #[test]
    fn keypoints() {
        let kp = vec!["Auction".to_string(), "hammer".to_string()];
        assert_eq!(keypoint_recall("the auction ended", &kp), 0.5);
        assert_eq!(keypoint_recall("", &kp), 0.0);
    }

    #[test]
    fn qa_reply_parsing() {
        assert_eq!(parse_qa_reply("Q: What?\nA: That."), Some(("What?".into(), "That.".into())));
        assert_eq!(parse_qa_reply("Q: What?\nA: line one\nline two"), Some(("What?".into(), "line one\nline two".into())));
        assert_eq!(parse_qa_reply("no format"), None);
    }

    #[test]
    fn mixing_counts() {
        let a: Vec<u32> = (0..10).collect();
        let b: Vec<u32> = (100..103).collect();
        let m = mix(&[a, b], &[0.7, 0.3], 20, 1).unwrap();
        assert_eq!(m.iter().filter(|x| **x < 100).count(), 14);
        assert_eq!(m.iter().filter(|x| **x >= 100).count(), 6);
        assert_eq!(m, mix(&[(0..10).collect(), (100..103).collect()], &[0.7, 0.3], 20, 1).unwrap());
    }

    #[test]
    fn export_schema_validation() {
        let p = PreferencePair {
            prompt: "p".into(),
            chosen: "c".into(),
            rejected: "r".into(),
            chosen_reward: 1.0,
            rejected_reward: 0.0,
            metadata: Metadata::new(),
        };
        let lines = render_training_lines(&[TrainingRecord::Preference(p.clone())], ExportFormat::DpoJsonl, None).unwrap();
        assert_eq!(lines, vec![r#"{"prompt":"p","chosen":"c","rejected":"r"}"#]);
        assert!(validate_export_line(&lines[0], ExportFormat::DpoJsonl).is_ok());
        assert!(validate_export_line(&lines[0], ExportFormat::SftJsonl).is_err());
        let sft = SFTExample { prompt: "q".into(), response: "a".into(), annotation_range: AnnotationRange::Short, metadata: Metadata::new() };
        assert!(matches!(
            render_training_lines(&[TrainingRecord::Preference(p), TrainingRecord::Sft(sft)], ExportFormat::DpoJsonl, None),
            Err(SynthError::MixedRecordKinds(_))
        ));
    }
}
