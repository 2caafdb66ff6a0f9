//! Deterministic in-process models used for hermetic runs and tests.
//!
//! Embedders:
//! * `hash` embeds the whole text with [`mock_embedder_construction`].
//! * `bag_of_words` sums the hash vectors of every lower-cased word token
//!   and normalizes, so texts sharing words land close together.
//!
//! Rerankers:
//! * `identity` keeps input order (score `1 / (1 + index)`).
//! * `lexical_overlap` scores each candidate by how many distinct query
//!   words it contains.
//!
//! Generators:
//! * `scripted` answers from an ordered list of regex rules.

use std::collections::HashSet;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{
    Embedder, GatewayError, GenerationEvent, GenerationRequest, GenerationStream, Generator, ModelHandle, ModelRole,
    ModelSpec, Reranker,
};
use crate::tokenize::{default_tokenizer, is_punctuation, nfc};

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a over the UTF-8 bytes of `text`.
pub fn hash64(text: &str) -> u64 {
    text.bytes().fold(FNV_OFFSET, |h, b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

/// Unit vector derived from `text`.
///
/// Construction: `ChaCha8Rng::seed_from_u64(fnv1a64(nfc(text)) ^ seed)`
/// drives a Box-Muller transform producing `dim` standard normal draws,
/// which are then L2-normalized (in f64, stored as f32).
pub fn mock_embedder_construction(text: &str, dim: usize, seed: u64) -> Vec<f32> {
    assert!(dim >= 2, "mock embedder needs dim >= 2");
    let mut rng = ChaCha8Rng::seed_from_u64(hash64(&nfc(text)) ^ seed);
    let mut raw = Vec::with_capacity(dim);
    while raw.len() < dim {
        // 1 - u keeps the log argument in (0, 1]
        let u1: f64 = 1.0 - rng.random::<f64>();
        let u2: f64 = rng.random::<f64>();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        raw.push(r * theta.cos());
        if raw.len() < dim {
            raw.push(r * theta.sin());
        }
    }
    normalize_f64(&raw)
}

fn normalize_f64(v: &[f64]) -> Vec<f32> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        let mut out = vec![0.0; v.len()];
        out[0] = 1.0;
        return out;
    }
    v.iter().map(|x| (x / norm) as f32).collect()
}

fn word_tokens(text: &str) -> Vec<String> {
    default_tokenizer(&nfc(text))
        .into_iter()
        .filter(|t| !t.chars().all(is_punctuation))
        .map(|t| t.to_lowercase())
        .collect()
}

pub struct HashEmbedder {
    pub dim: usize,
    pub seed: u64,
}

impl Embedder for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, GatewayError> {
        Ok(texts.iter().map(|t| mock_embedder_construction(t, self.dim, self.seed)).collect())
    }
}

pub struct BagOfWordsEmbedder {
    pub dim: usize,
    pub seed: u64,
}

impl BagOfWordsEmbedder {
    pub fn embed_one(&self, text: &str) -> Vec<f32> {
        let words = word_tokens(text);
        if words.is_empty() {
            return mock_embedder_construction(text, self.dim, self.seed);
        }
        let mut acc = vec![0.0f64; self.dim];
        for w in &words {
            for (a, x) in acc.iter_mut().zip(mock_embedder_construction(w, self.dim, self.seed)) {
                *a += x as f64;
            }
        }
        normalize_f64(&acc)
    }
}

impl Embedder for BagOfWordsEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, GatewayError> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}

pub struct IdentityReranker;

impl Reranker for IdentityReranker {
    fn score(&self, _query: &str, candidates: &[String]) -> Result<Vec<(usize, f32)>, GatewayError> {
        Ok((0..candidates.len()).map(|i| (i, 1.0 / (1.0 + i as f32))).collect())
    }
}

pub struct LexicalOverlapReranker;

impl LexicalOverlapReranker {
    /// Number of distinct query words present in `candidate`.
    pub fn overlap(query: &str, candidate: &str) -> usize {
        let q: HashSet<String> = word_tokens(query).into_iter().collect();
        let c: HashSet<String> = word_tokens(candidate).into_iter().collect();
        q.intersection(&c).count()
    }
}

impl Reranker for LexicalOverlapReranker {
    fn score(&self, query: &str, candidates: &[String]) -> Result<Vec<(usize, f32)>, GatewayError> {
        Ok(candidates.iter().enumerate().map(|(i, c)| (i, Self::overlap(query, c) as f32)).collect())
    }
}

/// One scripted-generator rule. `pattern` is a regex searched in the
/// prompt. The reply is `response`, or, when `variants` is non-empty,
/// `variants[seed % len]`. `$1` / `${name}` expand to capture groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptRule {
    pub pattern: String,
    #[serde(default)]
    pub response: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub variants: Vec<String>,
}

impl ScriptRule {
    /// Rule matching exactly `prompt`.
    pub fn exact(prompt: &str, response: &str) -> Self {
        Self { pattern: format!("(?s)^{}$", regex::escape(prompt)), response: response.into(), variants: vec![] }
    }

    pub fn contains(needle: &str, response: &str) -> Self {
        Self { pattern: regex::escape(needle), response: response.into(), variants: vec![] }
    }

    pub fn with_variants(pattern: &str, variants: &[&str]) -> Self {
        Self {
            pattern: pattern.into(),
            response: String::new(),
            variants: variants.iter().map(|s| s.to_string()).collect(),
        }
    }
}

pub struct ScriptedGenerator {
    rules: Vec<(Regex, ScriptRule)>,
    default_response: Option<String>,
}

impl ScriptedGenerator {
    pub fn new(rules: Vec<ScriptRule>, default_response: Option<String>) -> Result<Self, regex::Error> {
        let rules = rules
            .into_iter()
            .map(|r| Regex::new(&r.pattern).map(|re| (re, r)))
            .collect::<Result<_, _>>()?;
        Ok(Self { rules, default_response })
    }

    fn respond(&self, req: &GenerationRequest) -> Result<String, GatewayError> {
        for (re, rule) in &self.rules {
            if let Some(caps) = re.captures(&req.prompt) {
                let template = if rule.variants.is_empty() {
                    &rule.response
                } else {
                    let i = (req.seed.unwrap_or(0) % rule.variants.len() as u64) as usize;
                    &rule.variants[i]
                };
                let mut out = String::new();
                caps.expand(template, &mut out);
                return Ok(out);
            }
        }
        self.default_response.clone().ok_or_else(|| GatewayError::EndpointError {
            status: None,
            attempts: 1,
            message: "no scripted response matches the prompt".into(),
        })
    }
}

/// Splits text into deltas at word boundaries; each delta carries its
/// trailing whitespace so concatenation is lossless.
pub fn split_deltas(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut in_space = false;
    for c in text.chars() {
        if !c.is_whitespace() && in_space {
            out.push(std::mem::take(&mut cur));
            in_space = false;
        }
        if c.is_whitespace() {
            in_space = true;
        }
        cur.push(c);
    }
    if !cur.is_empty() || out.is_empty() {
        out.push(cur);
    }
    out
}

impl Generator for ScriptedGenerator {
    fn generate(&self, req: &GenerationRequest) -> Result<String, GatewayError> {
        self.respond(req)
    }

    fn generate_stream(&self, req: &GenerationRequest) -> Result<GenerationStream, GatewayError> {
        let text = self.respond(req)?;
        let events: Vec<Result<GenerationEvent, GatewayError>> = split_deltas(&text)
            .into_iter()
            .map(|text| Ok(GenerationEvent::TokenDelta { text }))
            .chain(std::iter::once(Ok(GenerationEvent::Done)))
            .collect();
        Ok(Box::new(events.into_iter()))
    }
}

pub(super) fn build(spec: &ModelSpec) -> Result<ModelHandle, GatewayError> {
    let unknown = |flavor: &str| GatewayError::InvalidSpec {
        model_id: spec.model_id.clone(),
        reason: format!("unknown mock flavor `{flavor}` for role {:?}", spec.role),
    };
    Ok(match spec.role {
        ModelRole::Embedder => {
            let dim = spec.dim.expect("validated");
            match spec.mock.as_deref().unwrap_or("hash") {
                "hash" => ModelHandle::Embedder(Arc::new(HashEmbedder { dim, seed: spec.seed })),
                "bag_of_words" => ModelHandle::Embedder(Arc::new(BagOfWordsEmbedder { dim, seed: spec.seed })),
                other => return Err(unknown(other)),
            }
        }
        ModelRole::Reranker => match spec.mock.as_deref().unwrap_or("lexical_overlap") {
            "identity" => ModelHandle::Reranker(Arc::new(IdentityReranker)),
            "lexical_overlap" => ModelHandle::Reranker(Arc::new(LexicalOverlapReranker)),
            other => return Err(unknown(other)),
        },
        ModelRole::Generator => match spec.mock.as_deref().unwrap_or("scripted") {
            "scripted" => {
                let g = ScriptedGenerator::new(spec.rules.clone(), spec.default_response.clone()).map_err(|e| {
                    GatewayError::InvalidSpec { model_id: spec.model_id.clone(), reason: e.to_string() }
                })?;
                ModelHandle::Generator(Arc::new(g))
            }
            other => return Err(unknown(other)),
        },
    })
}
