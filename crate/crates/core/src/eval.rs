//! Batch evaluation of retrieval and generation over QA datasets.
//!
//! Aggregates are arithmetic means over successful rows; failed rows keep
//! their error message and are counted in `failures`. Rows are sorted by
//! `example_id`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::QAExample;
use crate::gateway::mock::hash64;
use crate::gateway::Gateway;
use crate::knowledge::KnowledgeBase;
use crate::metrics::{exact_match, mrr_at_k, ndcg_at_k, recall_at_k, rouge_l, token_f1, RetrievalRunRecord};
use crate::parallel::ordered_map;
use crate::retrieval::{search, SearchBackend};
use crate::workflow::{execute, RunContext, WorkflowConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenerationMetric {
    RougeL,
    ExactMatch,
    TokenF1,
}

impl GenerationMetric {
    pub fn name(self) -> &'static str {
        match self {
            GenerationMetric::RougeL => "rouge_l",
            GenerationMetric::ExactMatch => "exact_match",
            GenerationMetric::TokenF1 => "token_f1",
        }
    }

    fn score(self, candidate: &str, reference: &str) -> f64 {
        match self {
            GenerationMetric::RougeL => rouge_l(candidate, reference).f,
            GenerationMetric::ExactMatch => exact_match(candidate, reference),
            GenerationMetric::TokenF1 => token_f1(candidate, reference),
        }
    }

    /// Best score over all references.
    pub fn score_max(self, candidate: &str, references: &[String]) -> f64 {
        references.iter().map(|r| self.score(candidate, r)).fold(0.0, f64::max)
    }

    pub const ALL: [GenerationMetric; 3] = [GenerationMetric::RougeL, GenerationMetric::ExactMatch, GenerationMetric::TokenF1];
}

impl FromStr for GenerationMetric {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "rouge_l" => Ok(Self::RougeL),
            "exact_match" => Ok(Self::ExactMatch),
            "token_f1" => Ok(Self::TokenF1),
            other => Err(format!("unknown metric `{other}` (rouge_l, exact_match, token_f1)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub example_id: String,
    pub metrics: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ranked_chunk_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub run_id: String,
    pub dataset_id: String,
    pub kind: String,
    pub fingerprint: String,
    pub metrics: BTreeMap<String, f64>,
    pub rows: Vec<EvalRow>,
    pub failures: usize,
    pub wall_seconds: f64,
}

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("invalid evaluation request: {0}")]
    Invalid(String),
    #[error("index of knowledge base {0} is not ready")]
    IndexNotReady(String),
    #[error("report not found: {0}")]
    NotFound(String),
    #[error("i/o failure: {0}")]
    Io(String),
}

/// Means of each metric over rows without errors; metric names come from
/// `names` so an all-failed run still reports every metric (as 0).
pub fn aggregate(rows: &[EvalRow], names: &[String]) -> BTreeMap<String, f64> {
    let ok: Vec<&EvalRow> = rows.iter().filter(|r| r.error.is_none()).collect();
    names
        .iter()
        .map(|n| {
            let sum: f64 = ok.iter().map(|r| r.metrics.get(n).copied().unwrap_or(0.0)).sum();
            let mean = if ok.is_empty() { 0.0 } else { sum / ok.len() as f64 };
            (n.clone(), mean)
        })
        .collect()
}

fn finish(
    run_id: &str,
    dataset_id: &str,
    kind: &str,
    fingerprint: String,
    mut rows: Vec<EvalRow>,
    names: &[String],
    start: Instant,
) -> EvalReport {
    rows.sort_by(|a, b| a.example_id.cmp(&b.example_id));
    EvalReport {
        run_id: run_id.into(),
        dataset_id: dataset_id.into(),
        kind: kind.into(),
        fingerprint,
        metrics: aggregate(&rows, names),
        failures: rows.iter().filter(|r| r.error.is_some()).count(),
        rows,
        wall_seconds: start.elapsed().as_secs_f64(),
    }
}

pub fn retrieval_metric_names(k: usize) -> Vec<String> {
    vec![format!("mrr@{k}"), format!("ndcg@{k}"), format!("recall@{k}")]
}

pub struct RetrievalEval<'a> {
    pub kb: &'a KnowledgeBase,
    pub gw: &'a Gateway,
    pub k: usize,
    pub workers: usize,
}

/// Exact top-k retrieval per example, scored against its gold chunks.
pub fn evaluate_retrieval(
    ev: &RetrievalEval,
    dataset: &[QAExample],
    dataset_id: &str,
    run_id: &str,
) -> Result<EvalReport, EvalError> {
    if ev.k == 0 {
        return Err(EvalError::Invalid("k must be at least 1".into()));
    }
    ev.kb.ensure_ready().map_err(|_| EvalError::IndexNotReady(ev.kb.kb_id().to_string()))?;
    let start = Instant::now();
    let k = ev.k;
    let names = retrieval_metric_names(k);
    let rows = ordered_map(dataset, ev.workers, |_, ex| {
        let mut row = EvalRow {
            example_id: ex.example_id.clone(),
            metrics: BTreeMap::new(),
            ranked_chunk_ids: vec![],
            answer: None,
            error: None,
        };
        if ex.gold_chunk_ids.is_empty() {
            row.error = Some("example has no gold chunk ids".into());
            return row;
        }
        match search(ev.kb, ev.gw, &ex.query, k, &SearchBackend::Exact) {
            Ok(hits) => {
                let rec = RetrievalRunRecord {
                    example_id: ex.example_id.clone(),
                    ranked_chunk_ids: hits.into_iter().map(|h| h.chunk_id).collect(),
                    gold_chunk_ids: ex.gold_chunk_ids.clone(),
                };
                row.metrics.insert(names[0].clone(), mrr_at_k(&rec, k));
                row.metrics.insert(names[1].clone(), ndcg_at_k(&rec, k));
                row.metrics.insert(names[2].clone(), recall_at_k(&rec, k));
                row.ranked_chunk_ids = rec.ranked_chunk_ids;
            }
            Err(e) => row.error = Some(e.to_string()),
        }
        row
    });
    let fingerprint = format!("{:016x}", hash64(&format!("retrieval|{}|{}|{k}", ev.kb.kb_id(), ev.kb.embedder_id())));
    Ok(finish(run_id, dataset_id, "retrieval", fingerprint, rows, &names, start))
}

/// Runs the workflow per example and scores its answer against the gold
/// answers (max over references).
pub fn evaluate_generation(
    cfg: &WorkflowConfig,
    ctx: &RunContext,
    dataset: &[QAExample],
    metrics: &[GenerationMetric],
    dataset_id: &str,
    run_id: &str,
    workers: usize,
) -> Result<EvalReport, EvalError> {
    cfg.validate().map_err(|e| EvalError::Invalid(e.to_string()))?;
    if metrics.is_empty() {
        return Err(EvalError::Invalid("at least one metric is required".into()));
    }
    ctx.kb.ensure_ready().map_err(|_| EvalError::IndexNotReady(ctx.kb.kb_id().to_string()))?;
    let start = Instant::now();
    let names: Vec<String> = metrics.iter().map(|m| m.name().to_string()).collect();
    let rows = ordered_map(dataset, workers, |_, ex| {
        let mut row = EvalRow {
            example_id: ex.example_id.clone(),
            metrics: BTreeMap::new(),
            ranked_chunk_ids: vec![],
            answer: None,
            error: None,
        };
        if ex.answers.is_empty() {
            row.error = Some("example has no gold answer".into());
            return row;
        }
        match execute(cfg, ctx, &ex.query, &format!("{run_id}-{}", ex.example_id), &mut |_| {}) {
            Ok(trace) => {
                for m in metrics {
                    row.metrics.insert(m.name().to_string(), m.score_max(&trace.final_answer, &ex.answers));
                }
                row.answer = Some(trace.final_answer);
            }
            Err(e) => row.error = Some(e.to_string()),
        }
        row
    });
    Ok(finish(run_id, dataset_id, "generation", cfg.fingerprint(), rows, &names, start))
}

/// Reports persisted as `<dir>/<run_id>.json`.
#[derive(Debug, Clone)]
pub struct ReportStore {
    dir: PathBuf,
}

impl ReportStore {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    fn path(&self, run_id: &str) -> Result<PathBuf, EvalError> {
        if run_id.is_empty() || !run_id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
            return Err(EvalError::NotFound(run_id.to_string()));
        }
        Ok(self.dir.join(format!("{run_id}.json")))
    }

    pub fn save(&self, report: &EvalReport) -> Result<PathBuf, EvalError> {
        let path = self.path(&report.run_id)?;
        write_report(report, &path)?;
        Ok(path)
    }

    pub fn load(&self, run_id: &str) -> Result<EvalReport, EvalError> {
        let path = self.path(run_id)?;
        let text = std::fs::read_to_string(&path).map_err(|_| EvalError::NotFound(run_id.to_string()))?;
        serde_json::from_str(&text).map_err(|e| EvalError::Io(format!("{}: {e}", path.display())))
    }
}

pub fn write_report(report: &EvalReport, path: &Path) -> Result<(), EvalError> {
    let io = |e: std::io::Error| EvalError::Io(format!("{}: {e}", path.display()));
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(io)?;
    }
    let mut json = serde_json::to_string_pretty(report).expect("report serializes");
    json.push('\n');
    std::fs::write(path, json).map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(id: &str, v: f64, err: bool) -> EvalRow {
        EvalRow {
            example_id: id.into(),
            metrics: [("m".to_string(), v)].into(),
            ranked_chunk_ids: vec![],
            answer: None,
            error: err.then(|| "boom".to_string()),
        }
    }

    #[test]
    fn aggregate_skips_failed_rows() {
        let rows = vec![row("a", 1.0, false), row("b", 0.0, true), row("c", 0.5, false)];
        assert_eq!(aggregate(&rows, &["m".to_string()])["m"], 0.75);
        assert_eq!(aggregate(&[row("a", 1.0, true)], &["m".to_string()])["m"], 0.0);
    }

    #[test]
    fn metric_names_parse() {
        for m in GenerationMetric::ALL {
            assert_eq!(m.name().parse::<GenerationMetric>().unwrap(), m);
        }
        assert!("bleu".parse::<GenerationMetric>().is_err());
        assert_eq!(GenerationMetric::RougeL.score_max("a b", &["x".into(), "a b".into()]), 1.0);
    }

    #[test]
    fn report_store_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let store = ReportStore::new(dir.path());
        let rows = vec![row("a", 1.0, false)];
        let r = finish("run1", "ds", "retrieval", "fp".into(), rows, &["m".to_string()], Instant::now());
        store.save(&r).unwrap();
        assert_eq!(store.load("run1").unwrap(), r);
        assert!(store.load("nope").is_err());
    }
}
