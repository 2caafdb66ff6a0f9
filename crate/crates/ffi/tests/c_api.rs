use std::ffi::{c_char, CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use ragforge::dataset::DocFormat;
use ragforge::gateway::Gateway;
use ragforge::knowledge::{window_spans, BuildOptions, ChunkingConfig, IngestOptions, KbStore, KnowledgeBase};
use ragforge::metrics::{mrr_at_k, ndcg_at_k, recall_at_k, rouge_l, RetrievalRunRecord};
use ragforge::retrieval::{search, SearchBackend, SearchHit};
use ragforge_ffi::*;

fn toy() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/toy")
}

/// Builds and persists the toy knowledge base under `data_dir/kb`.
fn persist_toy(data_dir: &Path, build: bool) -> (KnowledgeBase, Gateway) {
    let gw = Gateway::from_registry_file(&toy().join("models.toml")).unwrap();
    let mut kb = KnowledgeBase::new("toy", ChunkingConfig::new(32, 0.15), "bow-64", 64).unwrap();
    let mut paths: Vec<PathBuf> = std::fs::read_dir(toy().join("docs")).unwrap().map(|e| e.unwrap().path()).collect();
    paths.sort();
    for p in paths {
        kb.ingest(&p, DocFormat::Txt, &IngestOptions::default()).unwrap();
    }
    if build {
        kb.build_index(&gw, &BuildOptions::default()).unwrap();
    }
    KbStore::new(data_dir.join("kb")).save(&kb).unwrap();
    (kb, gw)
}

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    let p = rf_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_string()
}

unsafe fn open(dir: &Path, kb_id: &str) -> (RfStatus, *mut RfKb) {
    let (d, m, id) = (c(dir.to_str().unwrap()), c(toy().join("models.toml").to_str().unwrap()), c(kb_id));
    let mut h = ptr::null_mut();
    (rf_kb_open(d.as_ptr(), m.as_ptr(), id.as_ptr(), &mut h), h)
}

unsafe fn search_json(h: *const RfKb, q: &str, k: usize, approx: u8) -> Vec<SearchHit> {
    let q = c(q);
    let mut out = ptr::null_mut();
    assert_eq!(rf_kb_search(h, q.as_ptr(), k, approx, &mut out), RfStatus::Ok);
    let hits = serde_json::from_str(CStr::from_ptr(out).to_str().unwrap()).unwrap();
    rf_string_free(out);
    hits
}

#[test]
fn handle_search_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let (kb, gw) = persist_toy(dir.path(), true);
    unsafe {
        let (st, h) = open(dir.path(), "toy");
        assert_eq!(st, RfStatus::Ok);
        let mut n = 0;
        assert_eq!(rf_kb_chunk_count(h, &mut n), RfStatus::Ok);
        assert_eq!(n, kb.chunks().len());
        for q in ["When is a sale by auction complete?", "copyright term", "inheritance"] {
            let want = search(&kb, &gw, q, 5, &SearchBackend::Exact).unwrap();
            assert_eq!(search_json(h, q, 5, 0), want);
            // small corpus: the quarter-probe index still returns k hits
            assert_eq!(search_json(h, q, 5, 1).len(), 5);
        }
        let mut out = ptr::null_mut();
        assert_eq!(rf_kb_search(h, c("q").as_ptr(), 0, 0, &mut out), RfStatus::InvalidArgument);
        assert!(out.is_null());
        assert!(last_error().contains("k"));
        rf_kb_free(h);
    }
}

#[test]
fn open_reports_missing_and_unbuilt() {
    let dir = tempfile::tempdir().unwrap();
    persist_toy(dir.path(), false);
    unsafe {
        let (st, h) = open(dir.path(), "nope");
        assert_eq!(st, RfStatus::NotFound);
        assert!(h.is_null());
        assert!(last_error().contains("nope"));

        let (st, h) = open(dir.path(), "toy");
        assert_eq!(st, RfStatus::Ok);
        let mut out = ptr::null_mut();
        assert_eq!(rf_kb_search(h, c("auction").as_ptr(), 3, 0, &mut out), RfStatus::IndexNotReady);
        rf_kb_free(h);

        let mut h = ptr::null_mut();
        assert_eq!(rf_kb_open(ptr::null(), ptr::null(), c("toy").as_ptr(), &mut h), RfStatus::NullArgument);
        assert_eq!(rf_kb_open(c("x").as_ptr(), ptr::null(), c("toy").as_ptr(), ptr::null_mut()), RfStatus::NullArgument);
        let bad = [0xffu8, 0];
        assert_eq!(rf_kb_open(bad.as_ptr().cast(), ptr::null(), c("toy").as_ptr(), &mut h), RfStatus::InvalidUtf8);
    }
}

#[test]
fn metrics_match_library() {
    let ranked = ["a", "b", "c", "d"].map(c);
    let gold = ["c", "z"].map(c);
    let rp: Vec<*const c_char> = ranked.iter().map(|s| s.as_ptr()).collect();
    let gp: Vec<*const c_char> = gold.iter().map(|s| s.as_ptr()).collect();
    let rec = RetrievalRunRecord {
        example_id: String::new(),
        ranked_chunk_ids: ["a", "b", "c", "d"].map(String::from).to_vec(),
        gold_chunk_ids: vec!["c".into(), "z".into()],
    };
    type Metric = unsafe extern "C" fn(*const *const c_char, usize, *const *const c_char, usize, usize, *mut f64) -> RfStatus;
    let pairs: [(Metric, fn(&RetrievalRunRecord, usize) -> f64); 3] =
        [(rf_mrr_at_k, mrr_at_k), (rf_ndcg_at_k, ndcg_at_k), (rf_recall_at_k, recall_at_k)];
    for (ffi, lib) in pairs {
        for k in 1..=5 {
            let mut v = -1.0;
            assert_eq!(unsafe { ffi(rp.as_ptr(), rp.len(), gp.as_ptr(), gp.len(), k, &mut v) }, RfStatus::Ok);
            assert_eq!(v, lib(&rec, k));
        }
        let mut v = 0.0;
        assert_eq!(unsafe { ffi(rp.as_ptr(), rp.len(), gp.as_ptr(), 0, 3, &mut v) }, RfStatus::InvalidArgument);
        assert_eq!(unsafe { ffi(ptr::null(), 2, gp.as_ptr(), gp.len(), 3, &mut v) }, RfStatus::NullArgument);
    }

    let mut r = RfRouge { precision: 0.0, recall: 0.0, f: 0.0, empty_input: 9 };
    assert_eq!(unsafe { rf_rouge_l(c("a c d").as_ptr(), c("a b c d").as_ptr(), &mut r) }, RfStatus::Ok);
    let want = rouge_l("a c d", "a b c d");
    assert_eq!((r.precision, r.recall, r.f, r.empty_input), (want.precision, want.recall, want.f, 0));
    assert_eq!(unsafe { rf_rouge_l(c("").as_ptr(), c("a").as_ptr(), &mut r) }, RfStatus::Ok);
    assert_eq!((r.f, r.empty_input), (0.0, 1));
}

#[test]
fn spans_match_library() {
    for (n, size, frac) in [(1024, 512, 0.15), (7, 3, 0.0), (100, 10, 0.49), (1, 4, 0.25)] {
        let (mut p, mut count) = (ptr::null_mut(), 0);
        assert_eq!(unsafe { rf_chunk_spans(n, size, frac, &mut p, &mut count) }, RfStatus::Ok);
        let flat = unsafe { std::slice::from_raw_parts(p, count * 2) }.to_vec();
        unsafe { rf_spans_free(p, count) };
        let want: Vec<usize> = window_spans(n, &ChunkingConfig::new(size, frac)).into_iter().flatten().collect();
        assert_eq!(flat, want);
    }
    let (mut p, mut count) = (ptr::null_mut(), 0);
    assert_eq!(unsafe { rf_chunk_spans(10, 4, 0.5, &mut p, &mut count) }, RfStatus::InvalidArgument);
    assert!(p.is_null());
    assert_eq!(unsafe { rf_chunk_spans(10, 0, 0.1, &mut p, &mut count) }, RfStatus::InvalidArgument);
}

#[test]
fn version_is_static() {
    let v = unsafe { CStr::from_ptr(rf_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

fn header() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("include/ragforge.h")
}

#[test]
fn header_declares_every_export() {
    let h = std::fs::read_to_string(header()).unwrap();
    for name in [
        "rf_version", "rf_last_error", "rf_string_free", "rf_kb_open", "rf_kb_free", "rf_kb_chunk_count",
        "rf_kb_search", "rf_mrr_at_k", "rf_ndcg_at_k", "rf_recall_at_k", "rf_rouge_l", "rf_chunk_spans",
        "rf_spans_free", "typedef struct RfKb RfKb", "RF_STATUS_INDEX_NOT_READY = 5",
    ] {
        assert!(h.contains(name), "header lacks {name}");
    }
}

const C_PROGRAM: &str = r#"
#include <stdio.h>
#include <string.h>
#include "ragforge.h"

int main(int argc, char **argv) {
    RfKb *kb = NULL;
    if (rf_kb_open(argv[1], argv[2], "toy", &kb) != RF_STATUS_OK) {
        fprintf(stderr, "open: %s\n", rf_last_error());
        return 1;
    }
    size_t n = 0;
    rf_kb_chunk_count(kb, &n);
    char *json = NULL;
    if (rf_kb_search(kb, "When is a sale by auction complete?", 2, 0, &json) != RF_STATUS_OK) return 2;
    printf("%zu %s\n", n, json);
    rf_string_free(json);
    rf_kb_free(kb);
    if (rf_kb_open(argv[1], NULL, "missing", &kb) != RF_STATUS_NOT_FOUND || kb != NULL) return 3;
    RfRouge r;
    rf_rouge_l("a c d", "a b c d", &r);
    printf("%.4f\n", r.f);
    return 0;
}
"#;

/// Compiles a C program against the generated header and the static
/// library, then runs it.
#[test]
fn c_program_links_and_runs() {
    let Some(cc) = ["cc", "gcc", "clang"].into_iter().find(|c| Command::new(c).arg("--version").output().is_ok()) else {
        eprintln!("no C compiler; skipping");
        return;
    };
    // target/<profile>/deps/c_api-* -> target/<profile>
    let profile_dir = std::env::current_exe().unwrap().parent().unwrap().parent().unwrap().to_path_buf();
    let lib = profile_dir.join("libragforge_ffi.a");
    assert!(lib.exists(), "{} not built", lib.display());
    let dir = tempfile::tempdir().unwrap();
    let (kb, gw) = persist_toy(dir.path(), true);
    let src = dir.path().join("main.c");
    std::fs::write(&src, C_PROGRAM).unwrap();
    let exe = dir.path().join("main");
    let status = Command::new(cc)
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(header().parent().unwrap())
        .arg(&src)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success());
    let out = Command::new(&exe).arg(dir.path()).arg(toy().join("models.toml")).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    let mut lines = stdout.lines();
    let (count, json) = lines.next().unwrap().split_once(' ').unwrap();
    assert_eq!(count.parse::<usize>().unwrap(), kb.chunks().len());
    let hits: Vec<SearchHit> = serde_json::from_str(json).unwrap();
    assert_eq!(hits, search(&kb, &gw, "When is a sale by auction complete?", 2, &SearchBackend::Exact).unwrap());
    assert_eq!(lines.next(), Some("0.8571"));
}
