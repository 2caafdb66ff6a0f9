#![allow(dead_code)]

use std::path::{Path, PathBuf};

use ragforge::dataset::{read_records, DocFormat, QAExample, ValidationOptions};
use ragforge::gateway::mock::ScriptRule;
use ragforge::gateway::{Gateway, ModelRole, ModelSpec};
use ragforge::knowledge::{BuildOptions, ChunkingConfig, IngestOptions, KnowledgeBase};

pub fn toy_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/toy")
}

pub fn toy_gateway() -> Gateway {
    Gateway::from_registry_file(&toy_dir().join("models.toml")).expect("toy registry loads")
}

/// Unbuilt toy KB with all ten documents ingested at chunk size 32.
pub fn toy_kb_unbuilt() -> KnowledgeBase {
    let mut kb = KnowledgeBase::new("toy", ChunkingConfig::new(32, 0.15), "bow-64", 64).unwrap();
    let mut paths: Vec<PathBuf> = std::fs::read_dir(toy_dir().join("docs"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    paths.sort();
    for p in paths {
        kb.ingest(&p, DocFormat::Txt, &IngestOptions::default()).unwrap();
    }
    kb
}

pub fn toy_kb(gw: &Gateway) -> KnowledgeBase {
    let mut kb = toy_kb_unbuilt();
    kb.build_index(gw, &BuildOptions::default()).unwrap();
    kb
}

pub fn toy_qa() -> Vec<QAExample> {
    read_records(&toy_dir().join("qa.jsonl"), &ValidationOptions::default()).unwrap()
}

pub fn scripted(id: &str, rules: Vec<ScriptRule>, default: Option<&str>) -> ModelSpec {
    ModelSpec {
        mock: Some("scripted".into()),
        rules,
        default_response: default.map(str::to_string),
        ..ModelSpec::mock(id, ModelRole::Generator)
    }
}

pub fn hash_embedder(id: &str, dim: usize, seed: u64) -> ModelSpec {
    ModelSpec { dim: Some(dim), mock: Some("hash".into()), seed, ..ModelSpec::mock(id, ModelRole::Embedder) }
}

/// Splits an SSE body into `(event, data)` frames.
pub fn parse_sse(body: &str) -> Vec<(String, String)> {
    let mut out = Vec::new();
    for frame in body.replace("\r\n", "\n").split("\n\n") {
        let mut event = String::from("message");
        let mut data = Vec::new();
        for line in frame.lines() {
            if let Some(v) = line.strip_prefix("event:") {
                event = v.trim().to_string();
            } else if let Some(v) = line.strip_prefix("data:") {
                data.push(v.strip_prefix(' ').unwrap_or(v).to_string());
            }
        }
        if !data.is_empty() {
            out.push((event, data.join("\n")));
        }
    }
    out
}

/// Registers `bow` (bag-of-words embedder) and `synth-gen` (scripted
/// generator covering every synthesis template).
pub fn synthetic_gateway() -> Gateway {
    let gw = Gateway::new();
    gw.register(ModelSpec {
        dim: Some(64),
        mock: Some("bag_of_words".into()),
        seed: 3,
        ..ModelSpec::mock("bow", ModelRole::Embedder)
    })
    .unwrap();
    let query_variants: Vec<String> = (0..10).map(|v| format!("question {v} on ${{1}} ${{2}} ${{3}} ${{4}}")).collect();
    let qv: Vec<&str> = query_variants.iter().map(String::as_str).collect();
    let rules = vec![
        ScriptRule::with_variants(r"(?s)^Write one question.*Passage:\n(\S+) (\S+) (\S+) (\S+)", &qv),
        ScriptRule::with_variants(
            r"(?s)^Answer the question using the retrieved passages\.\n\n\[1\] \((\S+)\) (\S+ \S+ \S+ \S+ \S+ \S+ \S+ \S+)",
            &["${2}", "I do not know.", "${1} ${2}", "w000"],
        ),
        ScriptRule::with_variants(r"(?s)^Read the passage and write one question.*Passage:\n(\S+ \S+ \S+)", &["Q: What is ${1}?\nA: ${1}"]),
        ScriptRule::with_variants(
            r"(?s)^The passages below.*\[1\] \((\S+)\).*\[2\] \((\S+)\)",
            &["Q: How do ${1} and ${2} relate?\nA: They share a theme."],
        ),
    ];
    gw.register(scripted("synth-gen", rules, None)).unwrap();
    gw
}

/// Ten random-word documents of 80 tokens, chunked into 16-token windows
/// without overlap: exactly 50 chunks.
pub fn synthetic_kb(gw: &Gateway, seed: u64) -> KnowledgeBase {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut kb = KnowledgeBase::new("synthetic", ChunkingConfig::new(16, 0.0), "bow", 64).unwrap();
    for d in 0..10 {
        let words: Vec<String> = (0..80).map(|_| format!("w{:03}", rng.random_range(0..400))).collect();
        kb.add_document(&format!("doc{d}"), "generated", DocFormat::Txt, &words.join(" "), Default::default())
            .unwrap();
    }
    kb.build_index(gw, &BuildOptions::default()).unwrap();
    assert_eq!(kb.chunks().len(), 50);
    kb
}

/// One QA example per chunk: the query is the chunk's first five words and
/// the gold answer its first eight.
pub fn synthetic_qa(kb: &KnowledgeBase) -> Vec<QAExample> {
    kb.chunks()
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let words: Vec<&str> = c.text.split_whitespace().collect();
            QAExample {
                example_id: format!("s{i:03}"),
                query: words[..5].join(" "),
                answers: vec![words[..8].join(" ")],
                gold_chunk_ids: vec![c.chunk_id.clone()],
                keypoints: vec![],
                metadata: Default::default(),
            }
        })
        .collect()
}
