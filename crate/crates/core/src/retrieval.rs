//! Top-k search over a ready knowledge base.
//!
//! Similarity is the dot product of unit vectors (cosine). Hits are ordered
//! by score descending with ties broken by ascending `chunk_id`, and carry
//! dense 1-based ranks.

use std::cmp::Ordering;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{Gateway, GatewayError};
use crate::knowledge::{normalize, KnowledgeBase};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchHit {
    pub chunk_id: String,
    pub score: f64,
    pub rank: usize,
}

#[derive(Debug, Error, PartialEq)]
pub enum RetrievalError {
    #[error("index of knowledge base {0} is not ready")]
    IndexNotReady(String),
    #[error("embedder unavailable: {0}")]
    EmbedderUnavailable(String),
    #[error("invalid k: {0}")]
    InvalidK(String),
    #[error("query vector has dimension {got}, index has {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

pub enum SearchBackend<'a> {
    Exact,
    Approx(&'a IvfIndex),
}

pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
}

fn hit_order(a: &(f64, &str), b: &(f64, &str)) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

/// Keeps the best `k` of `(score, chunk_id)` candidates in hit order.
fn select_top_k(mut scored: Vec<(f64, &str)>, k: usize) -> Vec<SearchHit> {
    if scored.len() > k {
        scored.select_nth_unstable_by(k - 1, hit_order);
        scored.truncate(k);
    }
    scored.sort_by(hit_order);
    scored
        .into_iter()
        .enumerate()
        .map(|(i, (score, id))| SearchHit { chunk_id: id.to_string(), score, rank: i + 1 })
        .collect()
}

/// Embeds and normalizes a query with the knowledge base's embedder.
pub fn embed_query(kb: &KnowledgeBase, gw: &Gateway, query: &str) -> Result<Vec<f32>, RetrievalError> {
    let v = gw.embed(kb.embedder_id(), &[query.to_string()]).map_err(|e| match e {
        GatewayError::DimensionMismatch { expected, got } => RetrievalError::DimensionMismatch { expected, got },
        other => RetrievalError::EmbedderUnavailable(other.to_string()),
    })?;
    let v = v.into_iter().next().unwrap_or_default();
    normalize(&v).ok_or_else(|| RetrievalError::EmbedderUnavailable("embedder returned a zero query vector".into()))
}

/// Searches with a precomputed unit query vector.
pub fn search_vector(kb: &KnowledgeBase, query: &[f32], k: usize, backend: &SearchBackend) -> Result<Vec<SearchHit>, RetrievalError> {
    kb.ensure_ready().map_err(|_| RetrievalError::IndexNotReady(kb.kb_id().to_string()))?;
    if k == 0 {
        return Err(RetrievalError::InvalidK("k must be at least 1".into()));
    }
    if query.len() != kb.embedding_dim() {
        return Err(RetrievalError::DimensionMismatch { expected: kb.embedding_dim(), got: query.len() });
    }
    let chunks = kb.chunks();
    let scored: Vec<(f64, &str)> = match backend {
        SearchBackend::Exact => (0..chunks.len()).map(|i| (dot(query, kb.vector(i)), chunks[i].chunk_id.as_str())).collect(),
        SearchBackend::Approx(ivf) => ivf
            .candidates(query)
            .into_iter()
            .map(|i| (dot(query, kb.vector(i)), chunks[i].chunk_id.as_str()))
            .collect(),
    };
    Ok(select_top_k(scored, k))
}

pub fn search(kb: &KnowledgeBase, gw: &Gateway, query: &str, k: usize, backend: &SearchBackend) -> Result<Vec<SearchHit>, RetrievalError> {
    kb.ensure_ready().map_err(|_| RetrievalError::IndexNotReady(kb.kb_id().to_string()))?;
    if k == 0 {
        return Err(RetrievalError::InvalidK("k must be at least 1".into()));
    }
    let q = embed_query(kb, gw, query)?;
    search_vector(kb, &q, k, backend)
}

/// Exact retrieval of `k_retrieve` hits followed by reranking; returns the
/// top `k_final` with reranker scores and fresh dense ranks.
pub fn search_then_rerank(
    kb: &KnowledgeBase,
    gw: &Gateway,
    query: &str,
    k_retrieve: usize,
    k_final: usize,
    reranker_id: &str,
) -> Result<Vec<SearchHit>, RetrievalError> {
    if k_final == 0 || k_final > k_retrieve {
        return Err(RetrievalError::InvalidK(format!("need 1 <= k_final ({k_final}) <= k_retrieve ({k_retrieve})")));
    }
    let hits = search(kb, gw, query, k_retrieve, &SearchBackend::Exact)?;
    let texts: Vec<String> = hits.iter().map(|h| kb.chunk(&h.chunk_id).map(|c| c.text.clone()).unwrap_or_default()).collect();
    let order = gw.rerank(reranker_id, query, &texts)?;
    Ok(order
        .into_iter()
        .take(k_final)
        .enumerate()
        .map(|(i, (idx, score))| SearchHit { chunk_id: hits[idx].chunk_id.clone(), score: score as f64, rank: i + 1 })
        .collect())
}

#[derive(Debug, Clone)]
pub struct IvfConfig {
    /// Lists scanned per query; `None` means `ceil(nlist / 4)`.
    pub n_probes: Option<usize>,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for IvfConfig {
    fn default() -> Self {
        Self { n_probes: None, iterations: 20, seed: 0 }
    }
}

/// Inverted-file index: spherical k-means centroids with one posting list
/// per non-empty cluster.
#[derive(Debug, Clone)]
pub struct IvfIndex {
    dim: usize,
    nlist: usize,
    centroids: Vec<Vec<f32>>,
    lists: Vec<Vec<usize>>,
    n_probes: usize,
}

impl IvfIndex {
    /// Builds with `nlist = ceil(sqrt(n))`, seeded random initial centroids
    /// and a fixed number of Lloyd iterations.
    pub fn build(kb: &KnowledgeBase, cfg: &IvfConfig) -> Result<Self, RetrievalError> {
        kb.ensure_ready().map_err(|_| RetrievalError::IndexNotReady(kb.kb_id().to_string()))?;
        let n = kb.chunks().len();
        let dim = kb.embedding_dim();
        let nlist = ((n as f64).sqrt().ceil() as usize).max(1);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut init = rand::seq::index::sample(&mut rng, n, nlist).into_vec();
        init.sort_unstable();
        let mut centroids: Vec<Vec<f32>> = init.iter().map(|&i| kb.vector(i).to_vec()).collect();
        let mut assign = vec![0usize; n];
        for iter in 0..=cfg.iterations {
            for (i, a) in assign.iter_mut().enumerate() {
                *a = nearest(&centroids, kb.vector(i));
            }
            if iter == cfg.iterations {
                break;
            }
            let mut sums = vec![vec![0.0f64; dim]; nlist];
            let mut counts = vec![0usize; nlist];
            for (i, &a) in assign.iter().enumerate() {
                counts[a] += 1;
                for (s, x) in sums[a].iter_mut().zip(kb.vector(i)) {
                    *s += *x as f64;
                }
            }
            for c in 0..nlist {
                if counts[c] == 0 {
                    continue;
                }
                let mean: Vec<f32> = sums[c].iter().map(|s| (*s / counts[c] as f64) as f32).collect();
                if let Some(unit) = normalize(&mean) {
                    centroids[c] = unit;
                }
            }
        }
        let mut lists = vec![Vec::new(); nlist];
        for (i, &a) in assign.iter().enumerate() {
            lists[a].push(i);
        }
        let (centroids, lists): (Vec<_>, Vec<_>) =
            centroids.into_iter().zip(lists).filter(|(_, l)| !l.is_empty()).unzip();
        let default_probes = nlist.div_ceil(4);
        let n_probes = cfg.n_probes.unwrap_or(default_probes).clamp(1, lists.len().max(1));
        Ok(Self { dim, nlist, centroids, lists, n_probes })
    }

    pub fn nlist(&self) -> usize {
        self.nlist
    }

    pub fn n_lists(&self) -> usize {
        self.lists.len()
    }

    pub fn n_probes(&self) -> usize {
        self.n_probes
    }

    pub fn set_n_probes(&mut self, n: usize) {
        self.n_probes = n.clamp(1, self.lists.len().max(1));
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Chunk positions in the `n_probes` lists closest to `query`.
    pub fn candidates(&self, query: &[f32]) -> Vec<usize> {
        let mut order: Vec<(f64, usize)> = self.centroids.iter().enumerate().map(|(i, c)| (dot(query, c), i)).collect();
        order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        order.iter().take(self.n_probes).flat_map(|&(_, l)| self.lists[l].iter().copied()).collect()
    }

    /// Mean fraction of the exact top-k recovered by this index.
    pub fn recall_against_exact(&self, kb: &KnowledgeBase, queries: &[Vec<f32>], k: usize) -> Result<f64, RetrievalError> {
        if queries.is_empty() {
            return Ok(1.0);
        }
        let mut total = 0.0;
        for q in queries {
            let exact = search_vector(kb, q, k, &SearchBackend::Exact)?;
            let approx = search_vector(kb, q, k, &SearchBackend::Approx(self))?;
            let found = exact.iter().filter(|h| approx.iter().any(|a| a.chunk_id == h.chunk_id)).count();
            total += found as f64 / exact.len().max(1) as f64;
        }
        Ok(total / queries.len() as f64)
    }
}

fn nearest(centroids: &[Vec<f32>], v: &[f32]) -> usize {
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (i, c) in centroids.iter().enumerate() {
        let s = dot(v, c);
        if s > best_score {
            best = i;
            best_score = s;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{DocFormat, Metadata};
    use crate::gateway::{Embedder, ModelHandle, ModelRole, ModelSpec};
    use crate::knowledge::{BuildOptions, ChunkingConfig};
    use std::collections::HashMap;
    use std::sync::Arc;

    /// Embedder returning fixed vectors per exact text.
    struct Table(HashMap<String, Vec<f32>>, usize);
    impl Embedder for Table {
        fn dim(&self) -> usize {
            self.1
        }
        fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, GatewayError> {
            Ok(texts.iter().map(|t| self.0[t].clone()).collect())
        }
    }

    fn table_kb(rows: &[(&str, &str, Vec<f32>)], queries: &[(&str, Vec<f32>)]) -> (KnowledgeBase, Gateway) {
        let dim = rows[0].2.len();
        let mut map: HashMap<String, Vec<f32>> = rows.iter().map(|(_, t, v)| (t.to_string(), v.clone())).collect();
        map.extend(queries.iter().map(|(q, v)| (q.to_string(), v.clone())));
        let gw = Gateway::new();
        gw.register_handle(
            ModelSpec { dim: Some(dim), ..ModelSpec::mock("emb", ModelRole::Embedder) },
            ModelHandle::Embedder(Arc::new(Table(map, dim))),
        )
        .unwrap();
        gw.register(ModelSpec { mock: Some("lexical_overlap".into()), ..ModelSpec::mock("lex", ModelRole::Reranker) }).unwrap();
        gw.register(ModelSpec { mock: Some("identity".into()), ..ModelSpec::mock("id", ModelRole::Reranker) }).unwrap();
        let mut kb = KnowledgeBase::new("t", ChunkingConfig::new(64, 0.0), "emb", dim).unwrap();
        for (id, text, _) in rows {
            kb.add_document(id, "mem", DocFormat::Txt, text, Metadata::new()).unwrap();
        }
        kb.build_index(&gw, &BuildOptions::default()).unwrap();
        (kb, gw)
    }

    #[test]
    fn hand_computed_cosines() {
        let (kb, gw) = table_kb(
            &[("d1", "one", vec![1.0, 0.0]), ("d2", "two", vec![0.0, 1.0]), ("d3", "three", vec![0.6, 0.8])],
            &[("q", vec![1.0, 0.0])],
        );
        let hits = search(&kb, &gw, "q", 2, &SearchBackend::Exact).unwrap();
        assert_eq!(hits.len(), 2);
        assert_eq!((hits[0].chunk_id.as_str(), hits[0].rank), ("d1#0", 1));
        assert!((hits[0].score - 1.0).abs() < 1e-6);
        assert_eq!((hits[1].chunk_id.as_str(), hits[1].rank), ("d3#0", 2));
        assert!((hits[1].score - 0.6).abs() < 1e-6);

        let all = search(&kb, &gw, "q", 10, &SearchBackend::Exact).unwrap();
        assert_eq!(all.len(), 3);
        assert!(all.windows(2).all(|w| w[0].score >= w[1].score));
    }

    #[test]
    fn ties_by_chunk_id() {
        let (kb, gw) = table_kb(
            &[("b", "bee", vec![0.0, 1.0]), ("a", "ay", vec![0.0, 1.0]), ("c", "see", vec![1.0, 0.0])],
            &[("q", vec![0.0, 1.0])],
        );
        let hits = search(&kb, &gw, "q", 2, &SearchBackend::Exact).unwrap();
        assert_eq!(hits[0].chunk_id, "a#0");
        assert_eq!(hits[1].chunk_id, "b#0");
    }

    #[test]
    fn not_ready_and_bad_k() {
        let kb = KnowledgeBase::new("empty", ChunkingConfig::default(), "emb", 2).unwrap();
        let gw = Gateway::new();
        assert_eq!(
            search(&kb, &gw, "q", 1, &SearchBackend::Exact),
            Err(RetrievalError::IndexNotReady("empty".into()))
        );
        let (kb, gw) = table_kb(&[("d", "x", vec![1.0, 0.0])], &[("q", vec![1.0, 0.0])]);
        assert!(matches!(search(&kb, &gw, "q", 0, &SearchBackend::Exact), Err(RetrievalError::InvalidK(_))));
    }

    #[test]
    fn rerank_promotes_lexical_match() {
        // vector order: d1, d2, d3; lexical overlap with the query favours d3
        let (kb, gw) = table_kb(
            &[
                ("d1", "unrelated words here", vec![1.0, 0.0]),
                ("d2", "more filler text", vec![0.9, 0.1]),
                ("d3", "auction law applies", vec![0.8, 0.2]),
            ],
            &[("auction law", vec![1.0, 0.0])],
        );
        let plain = search(&kb, &gw, "auction law", 3, &SearchBackend::Exact).unwrap();
        assert_eq!(plain[2].chunk_id, "d3#0");
        let rr = search_then_rerank(&kb, &gw, "auction law", 3, 1, "lex").unwrap();
        assert_eq!(rr[0].chunk_id, "d3#0");
        assert_eq!(rr[0].rank, 1);
        assert_eq!(rr[0].score, 2.0);

        let same = search_then_rerank(&kb, &gw, "auction law", 3, 2, "id").unwrap();
        let ids: Vec<_> = same.iter().map(|h| h.chunk_id.clone()).collect();
        assert_eq!(ids, plain.iter().take(2).map(|h| h.chunk_id.clone()).collect::<Vec<_>>());

        let full = search_then_rerank(&kb, &gw, "auction law", 3, 3, "lex").unwrap();
        let mut a: Vec<_> = full.iter().map(|h| h.chunk_id.clone()).collect();
        let mut b: Vec<_> = plain.iter().map(|h| h.chunk_id.clone()).collect();
        a.sort();
        b.sort();
        assert_eq!(a, b);
        assert!(search_then_rerank(&kb, &gw, "auction law", 2, 3, "lex").is_err());
    }

    #[test]
    fn ivf_full_probe_matches_exact() {
        let gw = Gateway::new();
        gw.register(ModelSpec { dim: Some(8), ..ModelSpec::mock("emb", ModelRole::Embedder) }).unwrap();
        let mut kb = KnowledgeBase::new("r", ChunkingConfig::new(4, 0.0), "emb", 8).unwrap();
        for d in 0..30 {
            let text: String = (0..4).map(|w| format!("t{d}x{w} ")).collect();
            kb.add_document(&format!("doc{d:02}"), "mem", DocFormat::Txt, &text, Metadata::new()).unwrap();
        }
        kb.build_index(&gw, &BuildOptions::default()).unwrap();
        let mut ivf = IvfIndex::build(&kb, &IvfConfig::default()).unwrap();
        assert_eq!(ivf.nlist(), 6);
        assert!(ivf.n_lists() <= ivf.nlist());
        ivf.set_n_probes(ivf.nlist());
        for q in ["t1x1", "t7x3", "something else"] {
            let e = search(&kb, &gw, q, 5, &SearchBackend::Exact).unwrap();
            let a = search(&kb, &gw, q, 5, &SearchBackend::Approx(&ivf)).unwrap();
            assert_eq!(e, a);
        }
    }

    #[test]
    fn ivf_drops_empty_clusters() {
        // duplicated vectors force empty clusters after assignment
        let rows: Vec<(String, String, Vec<f32>)> =
            (0..9).map(|i| (format!("d{i}"), format!("text{i}"), vec![1.0, 0.0])).collect();
        let rows_ref: Vec<(&str, &str, Vec<f32>)> = rows.iter().map(|(a, b, v)| (a.as_str(), b.as_str(), v.clone())).collect();
        let (kb, _) = table_kb(&rows_ref, &[]);
        let ivf = IvfIndex::build(&kb, &IvfConfig::default()).unwrap();
        assert_eq!(ivf.nlist(), 3);
        assert_eq!(ivf.n_lists(), 1);
        let q = vec![1.0, 0.0];
        assert_eq!(ivf.candidates(&q).len(), 9);
    }
}
