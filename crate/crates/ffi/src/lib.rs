//! C ABI over the ragforge library.
//!
//! Every fallible call returns an [`RfStatus`]; on failure the message is
//! available from [`rf_last_error`] on the same thread. Strings handed out
//! by the library must be released with [`rf_string_free`]; knowledge-base
//! handles with [`rf_kb_free`]; span arrays with [`rf_spans_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::sync::OnceLock;

use ragforge::gateway::Gateway;
use ragforge::knowledge::{window_spans, ChunkingConfig, KbStore, KnowledgeBase, KnowledgeError};
use ragforge::metrics::{mrr_at_k, ndcg_at_k, recall_at_k, rouge_l, RetrievalRunRecord};
use ragforge::retrieval::{search, IvfConfig, IvfIndex, RetrievalError, SearchBackend};

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RfStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    NotFound = 4,
    IndexNotReady = 5,
    Io = 6,
    Model = 7,
    Internal = 8,
}

/// ROUGE-L scores for one candidate/reference pair.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RfRouge {
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
    /// Non-zero when either side had no tokens.
    pub empty_input: u8,
}

/// Opaque handle to a loaded knowledge base and its model gateway.
pub struct RfKb {
    kb: KnowledgeBase,
    gateway: Gateway,
    ivf: OnceLock<Result<IvfIndex, String>>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(RfStatus, String);

impl Failure {
    fn new(status: RfStatus, msg: impl Into<String>) -> Self {
        Self(status, msg.into())
    }
}

impl From<KnowledgeError> for Failure {
    fn from(e: KnowledgeError) -> Self {
        let status = match &e {
            KnowledgeError::NotFound(_) => RfStatus::NotFound,
            KnowledgeError::IndexNotReady(_) => RfStatus::IndexNotReady,
            KnowledgeError::Io { .. } | KnowledgeError::CorruptSnapshot(_) => RfStatus::Io,
            KnowledgeError::InvalidConfig(_) => RfStatus::InvalidArgument,
            _ => RfStatus::Internal,
        };
        Self(status, e.to_string())
    }
}

impl From<RetrievalError> for Failure {
    fn from(e: RetrievalError) -> Self {
        let status = match &e {
            RetrievalError::IndexNotReady(_) => RfStatus::IndexNotReady,
            RetrievalError::InvalidK(_) => RfStatus::InvalidArgument,
            _ => RfStatus::Model,
        };
        Self(status, e.to_string())
    }
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

/// Runs `f`, translating failures and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> RfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            RfStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            RfStatus::Internal
        }
    }
}

unsafe fn text<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::new(RfStatus::NullArgument, format!("{name} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Failure::new(RfStatus::InvalidUtf8, format!("{name} is not UTF-8")))
}

unsafe fn text_array(p: *const *const c_char, n: usize, name: &str) -> Result<Vec<String>, Failure> {
    if n == 0 {
        return Ok(Vec::new());
    }
    if p.is_null() {
        return Err(Failure::new(RfStatus::NullArgument, format!("{name} is null")));
    }
    std::slice::from_raw_parts(p, n).iter().map(|s| text(*s, name).map(str::to_owned)).collect()
}

fn out<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    // SAFETY: the caller promises `p` is null or valid for writes
    unsafe { p.as_mut() }.ok_or_else(|| Failure::new(RfStatus::NullArgument, format!("{name} is null")))
}

fn owned_string(s: String) -> *mut c_char {
    CString::new(s).map(CString::into_raw).unwrap_or(ptr::null_mut())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn rf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL. The pointer
/// stays valid until the next ragforge call on the same thread.
#[no_mangle]
pub extern "C" fn rf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Releases a string returned by this library. NULL is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed already.
#[no_mangle]
pub unsafe extern "C" fn rf_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Loads knowledge base `kb_id` from `data_dir` (the directory holding
/// `kb/`). `models_path` names the model registry and may be NULL.
///
/// # Safety
/// String arguments must be NULL or NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rf_kb_open(
    data_dir: *const c_char,
    models_path: *const c_char,
    kb_id: *const c_char,
    out_kb: *mut *mut RfKb,
) -> RfStatus {
    guard(|| {
        let slot = out(out_kb, "out_kb")?;
        *slot = ptr::null_mut();
        let dir = text(data_dir, "data_dir")?;
        let id = text(kb_id, "kb_id")?;
        let gateway = Gateway::new();
        if !models_path.is_null() {
            let models = text(models_path, "models_path")?;
            gateway.load_registry_file(Path::new(models)).map_err(|e| Failure::new(RfStatus::Model, e.to_string()))?;
        }
        let kb = KbStore::new(Path::new(dir).join("kb")).load(id)?;
        *slot = Box::into_raw(Box::new(RfKb { kb, gateway, ivf: OnceLock::new() }));
        Ok(())
    })
}

/// Releases a handle from [`rf_kb_open`]. NULL is ignored.
///
/// # Safety
/// `kb` must come from [`rf_kb_open`] and not have been freed already.
#[no_mangle]
pub unsafe extern "C" fn rf_kb_free(kb: *mut RfKb) {
    if !kb.is_null() {
        drop(Box::from_raw(kb));
    }
}

/// Number of chunks in the knowledge base.
///
/// # Safety
/// `kb` must be a live handle; `out_count` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rf_kb_chunk_count(kb: *const RfKb, out_count: *mut usize) -> RfStatus {
    guard(|| {
        let h = kb.as_ref().ok_or_else(|| Failure::new(RfStatus::NullArgument, "kb is null"))?;
        *out(out_count, "out_count")? = h.kb.chunks().len();
        Ok(())
    })
}

/// Top-`k` search. Writes a JSON array of `{chunk_id, score, rank}` to
/// `out_json` (free with [`rf_string_free`]). A non-zero `approx` uses the
/// IVF index, built on first use.
///
/// # Safety
/// `kb` must be a live handle; `query` NUL-terminated; `out_json` writable.
#[no_mangle]
pub unsafe extern "C" fn rf_kb_search(
    kb: *const RfKb,
    query: *const c_char,
    k: usize,
    approx: u8,
    out_json: *mut *mut c_char,
) -> RfStatus {
    guard(|| {
        let slot = out(out_json, "out_json")?;
        *slot = ptr::null_mut();
        let h = kb.as_ref().ok_or_else(|| Failure::new(RfStatus::NullArgument, "kb is null"))?;
        let q = text(query, "query")?;
        let hits = if approx != 0 {
            let ivf = h
                .ivf
                .get_or_init(|| IvfIndex::build(&h.kb, &IvfConfig::default()).map_err(|e| e.to_string()))
                .as_ref()
                .map_err(|e| Failure::new(RfStatus::IndexNotReady, e.clone()))?;
            search(&h.kb, &h.gateway, q, k, &SearchBackend::Approx(ivf))?
        } else {
            search(&h.kb, &h.gateway, q, k, &SearchBackend::Exact)?
        };
        let json = serde_json::to_string(&hits).map_err(|e| Failure::new(RfStatus::Internal, e.to_string()))?;
        *slot = owned_string(json);
        Ok(())
    })
}

#[derive(Clone, Copy)]
enum RankMetric {
    Mrr,
    Ndcg,
    Recall,
}

unsafe fn ranking_metric(
    metric: RankMetric,
    ranked: *const *const c_char,
    n_ranked: usize,
    gold: *const *const c_char,
    n_gold: usize,
    k: usize,
    out_value: *mut f64,
) -> RfStatus {
    guard(|| {
        let slot = out(out_value, "out_value")?;
        if k == 0 {
            return Err(Failure::new(RfStatus::InvalidArgument, "k must be at least 1"));
        }
        if n_gold == 0 {
            return Err(Failure::new(RfStatus::InvalidArgument, "gold set is empty"));
        }
        let rec = RetrievalRunRecord {
            example_id: String::new(),
            ranked_chunk_ids: text_array(ranked, n_ranked, "ranked")?,
            gold_chunk_ids: text_array(gold, n_gold, "gold")?,
        };
        *slot = match metric {
            RankMetric::Mrr => mrr_at_k(&rec, k),
            RankMetric::Ndcg => ndcg_at_k(&rec, k),
            RankMetric::Recall => recall_at_k(&rec, k),
        };
        Ok(())
    })
}

/// Reciprocal rank of the first gold id within the top `k`.
///
/// # Safety
/// `ranked` and `gold` must hold `n_ranked` / `n_gold` NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn rf_mrr_at_k(
    ranked: *const *const c_char,
    n_ranked: usize,
    gold: *const *const c_char,
    n_gold: usize,
    k: usize,
    out_value: *mut f64,
) -> RfStatus {
    ranking_metric(RankMetric::Mrr, ranked, n_ranked, gold, n_gold, k, out_value)
}

/// Binary-relevance NDCG over the top `k`.
///
/// # Safety
/// Same contract as [`rf_mrr_at_k`].
#[no_mangle]
pub unsafe extern "C" fn rf_ndcg_at_k(
    ranked: *const *const c_char,
    n_ranked: usize,
    gold: *const *const c_char,
    n_gold: usize,
    k: usize,
    out_value: *mut f64,
) -> RfStatus {
    ranking_metric(RankMetric::Ndcg, ranked, n_ranked, gold, n_gold, k, out_value)
}

/// Fraction of gold ids found in the top `k`.
///
/// # Safety
/// Same contract as [`rf_mrr_at_k`].
#[no_mangle]
pub unsafe extern "C" fn rf_recall_at_k(
    ranked: *const *const c_char,
    n_ranked: usize,
    gold: *const *const c_char,
    n_gold: usize,
    k: usize,
    out_value: *mut f64,
) -> RfStatus {
    ranking_metric(RankMetric::Recall, ranked, n_ranked, gold, n_gold, k, out_value)
}

/// Token-level ROUGE-L between two texts.
///
/// # Safety
/// Both strings must be NUL-terminated; `out_score` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rf_rouge_l(candidate: *const c_char, reference: *const c_char, out_score: *mut RfRouge) -> RfStatus {
    guard(|| {
        let slot = out(out_score, "out_score")?;
        let s = rouge_l(text(candidate, "candidate")?, text(reference, "reference")?);
        *slot = RfRouge { precision: s.precision, recall: s.recall, f: s.f, empty_input: s.empty_input as u8 };
        Ok(())
    })
}

/// Chunk windows over `n_tokens` tokens as `[start, end)` pairs flattened
/// into `2 * out_count` values. Release with [`rf_spans_free`].
///
/// # Safety
/// `out_spans` and `out_count` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rf_chunk_spans(
    n_tokens: usize,
    chunk_size: usize,
    overlap_fraction: f64,
    out_spans: *mut *mut usize,
    out_count: *mut usize,
) -> RfStatus {
    guard(|| {
        let spans_slot = out(out_spans, "out_spans")?;
        let count_slot = out(out_count, "out_count")?;
        *spans_slot = ptr::null_mut();
        *count_slot = 0;
        let cfg = ChunkingConfig::new(chunk_size, overlap_fraction);
        cfg.validate().map_err(|e| Failure::new(RfStatus::InvalidArgument, e.to_string()))?;
        let spans = window_spans(n_tokens, &cfg);
        let flat: Box<[usize]> = spans.iter().flatten().copied().collect();
        *count_slot = spans.len();
        *spans_slot = Box::into_raw(flat).cast();
        Ok(())
    })
}

/// Releases spans from [`rf_chunk_spans`]. NULL is ignored.
///
/// # Safety
/// `spans`/`count` must be exactly what [`rf_chunk_spans`] produced.
#[no_mangle]
pub unsafe extern "C" fn rf_spans_free(spans: *mut usize, count: usize) {
    if !spans.is_null() {
        drop(Box::from_raw(ptr::slice_from_raw_parts_mut(spans, count * 2)));
    }
}
