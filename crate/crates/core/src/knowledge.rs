//! Knowledge bases: ingestion, token-window chunking, embedding and the
//! on-disk snapshot.
//!
//! Snapshot layout (version 1, all integers little-endian):
//!
//! ```text
//! offset  size        field
//! 0       8           magic "RFKBSNAP"
//! 8       4           version (u32) = 1
//! 12      4           dim (u32)
//! 16      8           count (u64), number of vectors == number of chunks
//! 24      4*dim*count vectors, f32, row-major in chunk order
//! ...     rest        chunk table, one JSON `Chunk` per line
//! ```

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{write_dataset, Chunk, DocFormat, Document, Metadata};
use crate::gateway::{Gateway, GatewayError};
use crate::tokenize::{nfc, token_spans, DEFAULT_TOKENIZER_ID};

pub const SNAPSHOT_MAGIC: &[u8; 8] = b"RFKBSNAP";
pub const SNAPSHOT_VERSION: u32 = 1;
const HEADER_LEN: usize = 24;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkingConfig {
    #[serde(default = "default_chunk_size")]
    pub chunk_size: usize,
    #[serde(default = "default_overlap")]
    pub overlap_fraction: f64,
    #[serde(default = "default_tokenizer_id")]
    pub tokenizer_id: String,
}

fn default_chunk_size() -> usize {
    512
}
fn default_overlap() -> f64 {
    0.15
}
fn default_tokenizer_id() -> String {
    DEFAULT_TOKENIZER_ID.to_string()
}

impl Default for ChunkingConfig {
    fn default() -> Self {
        Self { chunk_size: default_chunk_size(), overlap_fraction: default_overlap(), tokenizer_id: default_tokenizer_id() }
    }
}

impl ChunkingConfig {
    pub fn new(chunk_size: usize, overlap_fraction: f64) -> Self {
        Self { chunk_size, overlap_fraction, ..Self::default() }
    }

    /// `floor(chunk_size * overlap_fraction)`. A 1e-9 slack absorbs binary
    /// rounding of products that are mathematically integral.
    pub fn overlap_tokens(&self) -> usize {
        (self.chunk_size as f64 * self.overlap_fraction + 1e-9).floor() as usize
    }

    pub fn stride(&self) -> usize {
        self.chunk_size - self.overlap_tokens()
    }

    pub fn validate(&self) -> Result<(), KnowledgeError> {
        if self.chunk_size == 0 {
            return Err(KnowledgeError::InvalidConfig("chunk_size must be positive".into()));
        }
        if !(0.0..0.5).contains(&self.overlap_fraction) {
            return Err(KnowledgeError::InvalidConfig(format!(
                "overlap_fraction {} outside [0, 0.5)",
                self.overlap_fraction
            )));
        }
        if self.tokenizer_id != DEFAULT_TOKENIZER_ID {
            return Err(KnowledgeError::InvalidConfig(format!("unknown tokenizer `{}`", self.tokenizer_id)));
        }
        Ok(())
    }
}

/// Half-open token windows `[start, end)` covering `n_tokens` tokens.
pub fn window_spans(n_tokens: usize, cfg: &ChunkingConfig) -> Vec<[usize; 2]> {
    let mut out = Vec::new();
    if n_tokens == 0 {
        return out;
    }
    let stride = cfg.stride().max(1);
    let mut start = 0;
    loop {
        let end = (start + cfg.chunk_size).min(n_tokens);
        out.push([start, end]);
        if end == n_tokens {
            break;
        }
        start += stride;
    }
    out
}

/// Splits a document into overlapping token windows. Chunk text is the
/// exact source slice from the first to the last token of the window.
pub fn chunk_document(doc: &Document, cfg: &ChunkingConfig) -> Vec<Chunk> {
    let spans = token_spans(&doc.text);
    window_spans(spans.len(), cfg)
        .into_iter()
        .enumerate()
        .map(|(ordinal, [s, e])| Chunk {
            chunk_id: Chunk::make_id(&doc.doc_id, ordinal),
            doc_id: doc.doc_id.clone(),
            ordinal,
            token_span: [s, e],
            text: doc.text[spans[s].start..spans[e - 1].end].to_string(),
            token_count: e - s,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IndexState {
    Empty,
    Building,
    Ready,
}

#[derive(Debug, Error)]
pub enum KnowledgeError {
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),
    #[error("empty document: {0}")]
    EmptyDocument(String),
    #[error("parse failure at {location}: {reason}")]
    ParseFailure { location: String, reason: String },
    #[error("duplicate document id: {0}")]
    DuplicateDocument(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("knowledge base {0} has no chunks")]
    NoChunks(String),
    #[error("embedder unavailable: {0}")]
    EmbedderUnavailable(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("build aborted after {committed} of {total} chunks (resumable): {reason}")]
    PartialBuildAborted { committed: usize, total: usize, reason: String },
    #[error("embedder returned a zero vector for chunk {0}")]
    ZeroVector(String),
    #[error("index of knowledge base {0} is not ready")]
    IndexNotReady(String),
    #[error("knowledge base not found: {0}")]
    NotFound(String),
    #[error("knowledge base already exists: {0}")]
    AlreadyExists(String),
    #[error("corrupt snapshot: {0}")]
    CorruptSnapshot(String),
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> KnowledgeError + '_ {
    move |source| KnowledgeError::Io { path: path.display().to_string(), source }
}

/// How to read structured sources.
#[derive(Debug, Clone, Default)]
pub struct IngestOptions {
    /// Column (csv) or key (jsonl) holding document text; defaults to `text`.
    pub text_column: Option<String>,
    /// Column or key holding the document id; defaults to `{stem}-{row}`.
    pub id_column: Option<String>,
}

/// Conversion hook for formats without native support (for example PDF).
pub trait DocumentConverter: Send + Sync {
    fn extension(&self) -> &str;
    fn convert(&self, path: &Path) -> Result<String, KnowledgeError>;
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IndexSummary {
    pub n_chunks: usize,
    pub dim: usize,
    pub build_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct BuildOptions {
    pub batch_size: usize,
    /// Batches in flight at once; results are committed in chunk order.
    pub parallelism: usize,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self { batch_size: 32, parallelism: 1 }
    }
}

/// Persisted manifest of a knowledge base.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KbManifest {
    pub kb_id: String,
    pub chunking: ChunkingConfig,
    pub embedder_id: String,
    pub embedding_dim: usize,
    pub index_state: IndexState,
}

#[derive(Debug, Clone, Serialize)]
pub struct KbStatus {
    pub kb_id: String,
    pub chunking: ChunkingConfig,
    pub embedder_id: String,
    pub embedding_dim: usize,
    pub index_state: IndexState,
    pub n_documents: usize,
    pub n_chunks: usize,
    pub n_embedded: usize,
}

#[derive(Debug, Clone)]
pub struct KnowledgeBase {
    kb_id: String,
    chunking: ChunkingConfig,
    embedder_id: String,
    embedding_dim: usize,
    index_state: IndexState,
    documents: Vec<Document>,
    chunks: Vec<Chunk>,
    /// Row-major unit vectors for the first `vectors.len() / dim` chunks.
    vectors: Vec<f32>,
    chunk_pos: HashMap<String, usize>,
    doc_ids: HashSet<String>,
}

impl KnowledgeBase {
    pub fn new(kb_id: &str, chunking: ChunkingConfig, embedder_id: &str, embedding_dim: usize) -> Result<Self, KnowledgeError> {
        chunking.validate()?;
        if kb_id.is_empty() || kb_id.contains(['/', '\\']) || kb_id.starts_with('.') {
            return Err(KnowledgeError::InvalidConfig(format!("invalid kb_id `{kb_id}`")));
        }
        if embedding_dim == 0 {
            return Err(KnowledgeError::InvalidConfig("embedding_dim must be positive".into()));
        }
        Ok(Self {
            kb_id: kb_id.to_string(),
            chunking,
            embedder_id: embedder_id.to_string(),
            embedding_dim,
            index_state: IndexState::Empty,
            documents: Vec::new(),
            chunks: Vec::new(),
            vectors: Vec::new(),
            chunk_pos: HashMap::new(),
            doc_ids: HashSet::new(),
        })
    }

    pub fn kb_id(&self) -> &str {
        &self.kb_id
    }
    pub fn chunking(&self) -> &ChunkingConfig {
        &self.chunking
    }
    pub fn embedder_id(&self) -> &str {
        &self.embedder_id
    }
    pub fn embedding_dim(&self) -> usize {
        self.embedding_dim
    }
    pub fn index_state(&self) -> IndexState {
        self.index_state
    }
    pub fn documents(&self) -> &[Document] {
        &self.documents
    }
    pub fn chunks(&self) -> &[Chunk] {
        &self.chunks
    }

    pub fn chunk(&self, chunk_id: &str) -> Option<&Chunk> {
        self.chunk_pos.get(chunk_id).map(|&i| &self.chunks[i])
    }

    pub fn chunk_position(&self, chunk_id: &str) -> Option<usize> {
        self.chunk_pos.get(chunk_id).copied()
    }

    pub fn n_embedded(&self) -> usize {
        self.vectors.len() / self.embedding_dim
    }

    /// Unit vector of chunk `i`. Panics unless the chunk is embedded.
    pub fn vector(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.embedding_dim..(i + 1) * self.embedding_dim]
    }

    pub fn vectors(&self) -> &[f32] {
        &self.vectors
    }

    pub fn manifest(&self) -> KbManifest {
        KbManifest {
            kb_id: self.kb_id.clone(),
            chunking: self.chunking.clone(),
            embedder_id: self.embedder_id.clone(),
            embedding_dim: self.embedding_dim,
            index_state: self.index_state,
        }
    }

    pub fn status(&self) -> KbStatus {
        KbStatus {
            kb_id: self.kb_id.clone(),
            chunking: self.chunking.clone(),
            embedder_id: self.embedder_id.clone(),
            embedding_dim: self.embedding_dim,
            index_state: self.index_state,
            n_documents: self.documents.len(),
            n_chunks: self.chunks.len(),
            n_embedded: self.n_embedded(),
        }
    }

    pub fn ensure_ready(&self) -> Result<(), KnowledgeError> {
        if self.index_state == IndexState::Ready {
            Ok(())
        } else {
            Err(KnowledgeError::IndexNotReady(self.kb_id.clone()))
        }
    }

    /// Adds one document after NFC normalization and chunks it. Any
    /// existing index is discarded.
    pub fn add_document(
        &mut self,
        doc_id: &str,
        source_path: &str,
        format: DocFormat,
        text: &str,
        metadata: Metadata,
    ) -> Result<String, KnowledgeError> {
        let text = nfc(text);
        if token_spans(&text).is_empty() {
            return Err(KnowledgeError::EmptyDocument(if metadata.is_empty() {
                source_path.to_string()
            } else {
                format!("{source_path} {metadata:?}")
            }));
        }
        if self.doc_ids.contains(doc_id) {
            return Err(KnowledgeError::DuplicateDocument(doc_id.to_string()));
        }
        let doc = Document { doc_id: doc_id.to_string(), source_path: source_path.to_string(), format, text, metadata };
        for c in chunk_document(&doc, &self.chunking) {
            self.chunk_pos.insert(c.chunk_id.clone(), self.chunks.len());
            self.chunks.push(c);
        }
        self.doc_ids.insert(doc.doc_id.clone());
        self.documents.push(doc);
        self.vectors.clear();
        self.index_state = IndexState::Empty;
        Ok(doc_id.to_string())
    }

    /// Ingests a file (or every matching file of a directory, in name
    /// order). Returns the ids of the added documents.
    pub fn ingest(&mut self, path: &Path, format: DocFormat, opts: &IngestOptions) -> Result<Vec<String>, KnowledgeError> {
        if path.is_dir() {
            let mut files: Vec<PathBuf> = std::fs::read_dir(path)
                .map_err(io_err(path))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file() && matches_format(p, format))
                .collect();
            files.sort();
            let mut ids = Vec::new();
            for f in files {
                ids.extend(self.ingest(&f, format, opts)?);
            }
            return Ok(ids);
        }
        let docs = read_source(path, format, opts)?;
        // all-or-nothing: check before mutating
        let mut seen = HashSet::new();
        for (id, _, _) in &docs {
            if self.doc_ids.contains(id) || !seen.insert(id.clone()) {
                return Err(KnowledgeError::DuplicateDocument(id.clone()));
            }
        }
        let source = path.display().to_string();
        let mut ids = Vec::with_capacity(docs.len());
        for (id, text, meta) in docs {
            ids.push(self.add_document(&id, &source, format, &text, meta)?);
        }
        Ok(ids)
    }

    /// Ingests through a converter plugin, as a markdown document.
    pub fn ingest_with(&mut self, path: &Path, conv: &dyn DocumentConverter) -> Result<Vec<String>, KnowledgeError> {
        let text = conv.convert(path)?;
        let id = file_stem(path);
        Ok(vec![self.add_document(&id, &path.display().to_string(), DocFormat::Markdown, &text, Metadata::new())?])
    }

    /// Embeds every chunk, normalizes each vector to unit L2 norm and marks
    /// the index ready. A build interrupted after some batches were
    /// committed can be resumed by calling this again.
    pub fn build_index(&mut self, gw: &Gateway, opts: &BuildOptions) -> Result<IndexSummary, KnowledgeError> {
        let started = Instant::now();
        if self.chunks.is_empty() {
            return Err(KnowledgeError::NoChunks(self.kb_id.clone()));
        }
        let declared = gw.embedding_dim(&self.embedder_id).map_err(|e| self.map_gateway_err(e, 0))?;
        if declared != self.embedding_dim {
            return Err(KnowledgeError::DimensionMismatch { expected: self.embedding_dim, got: declared });
        }
        if self.index_state == IndexState::Ready {
            self.vectors.clear();
        }
        self.index_state = IndexState::Building;
        let total = self.chunks.len();
        let batch = opts.batch_size.max(1);
        let parallel = opts.parallelism.max(1);
        while self.n_embedded() < total {
            let start = self.n_embedded();
            let ranges: Vec<(usize, usize)> = (0..parallel)
                .map(|k| start + k * batch)
                .take_while(|&s| s < total)
                .map(|s| (s, (s + batch).min(total)))
                .collect();
            let chunks = &self.chunks;
            let results: Vec<Result<Vec<Vec<f32>>, GatewayError>> = if ranges.len() == 1 {
                let (s, e) = ranges[0];
                vec![embed_range(gw, &self.embedder_id, chunks, s, e)]
            } else {
                let embedder_id = &self.embedder_id;
                std::thread::scope(|scope| {
                    let handles: Vec<_> = ranges
                        .iter()
                        .map(|&(s, e)| scope.spawn(move || embed_range(gw, embedder_id, chunks, s, e)))
                        .collect();
                    handles.into_iter().map(|h| h.join().expect("embedding worker panicked")).collect()
                })
            };
            for (result, (s, _)) in results.into_iter().zip(ranges) {
                match result {
                    Ok(vs) => {
                        for (offset, v) in vs.into_iter().enumerate() {
                            let unit = normalize(&v).ok_or_else(|| KnowledgeError::ZeroVector(self.chunks[s + offset].chunk_id.clone()))?;
                            self.vectors.extend(unit);
                        }
                    }
                    Err(e) => return Err(self.map_gateway_err(e, total)),
                }
            }
        }
        self.index_state = IndexState::Ready;
        Ok(IndexSummary { n_chunks: total, dim: self.embedding_dim, build_seconds: started.elapsed().as_secs_f64() })
    }

    fn map_gateway_err(&self, e: GatewayError, total: usize) -> KnowledgeError {
        if let GatewayError::DimensionMismatch { expected, got } = e {
            return KnowledgeError::DimensionMismatch { expected, got };
        }
        let committed = self.n_embedded();
        if committed > 0 {
            KnowledgeError::PartialBuildAborted { committed, total, reason: e.to_string() }
        } else {
            KnowledgeError::EmbedderUnavailable(e.to_string())
        }
    }

    /// Serialized index snapshot. Only valid once the index is ready.
    pub fn snapshot_bytes(&self) -> Result<Vec<u8>, KnowledgeError> {
        self.ensure_ready()?;
        let mut out = Vec::with_capacity(HEADER_LEN + self.vectors.len() * 4);
        out.extend_from_slice(SNAPSHOT_MAGIC);
        out.extend_from_slice(&SNAPSHOT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.embedding_dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.chunks.len() as u64).to_le_bytes());
        for x in &self.vectors {
            out.extend_from_slice(&x.to_le_bytes());
        }
        for c in &self.chunks {
            serde_json::to_writer(&mut out, c).expect("chunk serialization");
            out.push(b'\n');
        }
        Ok(out)
    }

    /// Rebuilds a ready knowledge base from a manifest, its documents and a
    /// snapshot.
    pub fn from_parts(manifest: KbManifest, documents: Vec<Document>, snapshot: Option<&[u8]>, chunks: Vec<Chunk>) -> Result<Self, KnowledgeError> {
        let mut kb = Self::new(&manifest.kb_id, manifest.chunking, &manifest.embedder_id, manifest.embedding_dim)?;
        for d in &documents {
            kb.doc_ids.insert(d.doc_id.clone());
        }
        kb.documents = documents;
        let (chunks, vectors) = match snapshot {
            Some(bytes) => {
                let (dim, chunks, vectors) = parse_snapshot(bytes)?;
                if dim != kb.embedding_dim {
                    return Err(KnowledgeError::DimensionMismatch { expected: kb.embedding_dim, got: dim });
                }
                (chunks, vectors)
            }
            None => (chunks, Vec::new()),
        };
        for (i, c) in chunks.iter().enumerate() {
            kb.chunk_pos.insert(c.chunk_id.clone(), i);
        }
        kb.chunks = chunks;
        kb.vectors = vectors;
        kb.index_state = if snapshot.is_some() && manifest.index_state == IndexState::Ready {
            IndexState::Ready
        } else {
            IndexState::Empty
        };
        Ok(kb)
    }
}

fn embed_range(gw: &Gateway, embedder_id: &str, chunks: &[Chunk], s: usize, e: usize) -> Result<Vec<Vec<f32>>, GatewayError> {
    let texts: Vec<String> = chunks[s..e].iter().map(|c| c.text.clone()).collect();
    gw.embed(embedder_id, &texts)
}

/// Unit-normalized copy of `v`, or `None` for a zero vector.
pub fn normalize(v: &[f32]) -> Option<Vec<f32>> {
    let norm = v.iter().map(|x| (*x as f64) * (*x as f64)).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return None;
    }
    Some(v.iter().map(|x| (*x as f64 / norm) as f32).collect())
}

/// Parses a snapshot into `(dim, chunks, vectors)`.
pub fn parse_snapshot(bytes: &[u8]) -> Result<(usize, Vec<Chunk>, Vec<f32>), KnowledgeError> {
    let corrupt = |m: &str| KnowledgeError::CorruptSnapshot(m.to_string());
    if bytes.len() < HEADER_LEN || &bytes[..8] != SNAPSHOT_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != SNAPSHOT_VERSION {
        return Err(KnowledgeError::CorruptSnapshot(format!("unsupported version {version}")));
    }
    let dim = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    let vec_bytes = count.checked_mul(dim).and_then(|n| n.checked_mul(4)).ok_or_else(|| corrupt("size overflow"))?;
    let table_start = HEADER_LEN.checked_add(vec_bytes).filter(|&e| e <= bytes.len()).ok_or_else(|| corrupt("truncated vectors"))?;
    let vectors = bytes[HEADER_LEN..table_start]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let table = std::str::from_utf8(&bytes[table_start..]).map_err(|_| corrupt("chunk table is not UTF-8"))?;
    let chunks: Vec<Chunk> = table
        .lines()
        .filter(|l| !l.is_empty())
        .map(serde_json::from_str)
        .collect::<Result<_, _>>()
        .map_err(|e| KnowledgeError::CorruptSnapshot(e.to_string()))?;
    if chunks.len() != count {
        return Err(KnowledgeError::CorruptSnapshot(format!("header count {count} but {} chunk rows", chunks.len())));
    }
    Ok((dim, chunks, vectors))
}

fn matches_format(p: &Path, format: DocFormat) -> bool {
    let ext = p.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
    match format {
        DocFormat::Txt => ext == "txt",
        DocFormat::Markdown => ext == "md" || ext == "markdown",
        DocFormat::Jsonl => ext == "jsonl",
        DocFormat::Csv => ext == "csv",
    }
}

fn file_stem(path: &Path) -> String {
    path.file_stem().and_then(|s| s.to_str()).unwrap_or("doc").to_string()
}

fn scalar_to_string(v: &serde_json::Value) -> Option<String> {
    match v {
        serde_json::Value::String(s) => Some(s.clone()),
        serde_json::Value::Number(n) => Some(n.to_string()),
        serde_json::Value::Bool(b) => Some(b.to_string()),
        _ => None,
    }
}

type RawDoc = (String, String, Metadata);

fn read_source(path: &Path, format: DocFormat, opts: &IngestOptions) -> Result<Vec<RawDoc>, KnowledgeError> {
    let stem = file_stem(path);
    let text_col = opts.text_column.as_deref().unwrap_or("text");
    let location = |n: usize, what: &str| format!("{}:{what} {n}", path.display());
    match format {
        DocFormat::Txt | DocFormat::Markdown => {
            let text = std::fs::read_to_string(path).map_err(io_err(path))?;
            Ok(vec![(stem, text, Metadata::new())])
        }
        DocFormat::Jsonl => {
            let text = std::fs::read_to_string(path).map_err(io_err(path))?;
            let mut out = Vec::new();
            for (i, line) in text.lines().enumerate() {
                let n = i + 1;
                if line.trim().is_empty() {
                    continue;
                }
                let v: serde_json::Value = serde_json::from_str(line)
                    .map_err(|e| KnowledgeError::ParseFailure { location: location(n, "line"), reason: e.to_string() })?;
                let obj = v.as_object().ok_or_else(|| KnowledgeError::ParseFailure {
                    location: location(n, "line"),
                    reason: "not a JSON object".into(),
                })?;
                let body = obj.get(text_col).and_then(|t| t.as_str()).ok_or_else(|| KnowledgeError::ParseFailure {
                    location: location(n, "line"),
                    reason: format!("missing text field `{text_col}`"),
                })?;
                let mut meta: Metadata = obj
                    .iter()
                    .filter(|(k, _)| k.as_str() != text_col)
                    .filter_map(|(k, v)| scalar_to_string(v).map(|s| (k.clone(), s)))
                    .collect();
                meta.insert("source_line".into(), n.to_string());
                let id = match &opts.id_column {
                    Some(c) => meta.get(c).cloned().ok_or_else(|| KnowledgeError::ParseFailure {
                        location: location(n, "line"),
                        reason: format!("missing id field `{c}`"),
                    })?,
                    None => format!("{stem}-{n}"),
                };
                out.push((id, body.to_string(), meta));
            }
            Ok(out)
        }
        DocFormat::Csv => {
            let mut rdr = csv::Reader::from_path(path).map_err(|e| KnowledgeError::ParseFailure {
                location: path.display().to_string(),
                reason: e.to_string(),
            })?;
            let headers = rdr
                .headers()
                .map_err(|e| KnowledgeError::ParseFailure { location: location(1, "row"), reason: e.to_string() })?
                .clone();
            let text_idx = headers.iter().position(|h| h == text_col).ok_or_else(|| KnowledgeError::ParseFailure {
                location: location(1, "row"),
                reason: format!("missing text column `{text_col}`"),
            })?;
            let mut out = Vec::new();
            for (i, rec) in rdr.records().enumerate() {
                let n = i + 1;
                let rec = rec.map_err(|e| KnowledgeError::ParseFailure { location: location(n, "row"), reason: e.to_string() })?;
                let mut meta: BTreeMap<String, String> = headers
                    .iter()
                    .zip(rec.iter())
                    .enumerate()
                    .filter(|(j, _)| *j != text_idx)
                    .map(|(_, (h, v))| (h.to_string(), v.to_string()))
                    .collect();
                meta.insert("source_row".into(), n.to_string());
                let id = match &opts.id_column {
                    Some(c) => meta.get(c).cloned().ok_or_else(|| KnowledgeError::ParseFailure {
                        location: location(n, "row"),
                        reason: format!("missing id column `{c}`"),
                    })?,
                    None => format!("{stem}-{n}"),
                };
                out.push((id, rec.get(text_idx).unwrap_or("").to_string(), meta));
            }
            Ok(out)
        }
    }
}

/// Directory-backed persistence: `{root}/{kb_id}/` holds `manifest.json`,
/// `documents.jsonl`, `chunks.jsonl` and, once built, `index.snap`.
#[derive(Debug, Clone)]
pub struct KbStore {
    root: PathBuf,
}

impl KbStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn dir(&self, kb_id: &str) -> PathBuf {
        self.root.join(kb_id)
    }

    pub fn exists(&self, kb_id: &str) -> bool {
        self.dir(kb_id).join("manifest.json").is_file()
    }

    pub fn list(&self) -> Vec<String> {
        let mut ids: Vec<String> = std::fs::read_dir(&self.root)
            .into_iter()
            .flatten()
            .filter_map(|e| e.ok())
            .filter(|e| e.path().join("manifest.json").is_file())
            .filter_map(|e| e.file_name().to_str().map(str::to_string))
            .collect();
        ids.sort();
        ids
    }

    pub fn save(&self, kb: &KnowledgeBase) -> Result<(), KnowledgeError> {
        let dir = self.dir(kb.kb_id());
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let manifest = dir.join("manifest.json");
        let json = serde_json::to_vec_pretty(&kb.manifest()).expect("manifest serialization");
        std::fs::write(&manifest, json).map_err(io_err(&manifest))?;
        let map_ds = |e: crate::dataset::DatasetError| KnowledgeError::CorruptSnapshot(e.to_string());
        write_dataset(kb.documents(), &dir.join("documents.jsonl")).map_err(map_ds)?;
        write_dataset(kb.chunks(), &dir.join("chunks.jsonl")).map_err(map_ds)?;
        let snap = dir.join("index.snap");
        if kb.index_state() == IndexState::Ready {
            std::fs::write(&snap, kb.snapshot_bytes()?).map_err(io_err(&snap))?;
        } else if snap.exists() {
            std::fs::remove_file(&snap).map_err(io_err(&snap))?;
        }
        Ok(())
    }

    pub fn load(&self, kb_id: &str) -> Result<KnowledgeBase, KnowledgeError> {
        let dir = self.dir(kb_id);
        let manifest_path = dir.join("manifest.json");
        if !manifest_path.is_file() {
            return Err(KnowledgeError::NotFound(kb_id.to_string()));
        }
        let bytes = std::fs::read(&manifest_path).map_err(io_err(&manifest_path))?;
        let manifest: KbManifest =
            serde_json::from_slice(&bytes).map_err(|e| KnowledgeError::CorruptSnapshot(e.to_string()))?;
        let documents = read_jsonl(&dir.join("documents.jsonl"))?;
        let snap_path = dir.join("index.snap");
        let snapshot = if manifest.index_state == IndexState::Ready && snap_path.is_file() {
            Some(std::fs::read(&snap_path).map_err(io_err(&snap_path))?)
        } else {
            None
        };
        let chunks = if snapshot.is_some() { Vec::new() } else { read_jsonl(&dir.join("chunks.jsonl"))? };
        KnowledgeBase::from_parts(manifest, documents, snapshot.as_deref(), chunks)
    }
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, KnowledgeError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| KnowledgeError::CorruptSnapshot(format!("{}: {e}", path.display()))))
        .collect()
}
