//! Domain records and the JSON Lines interchange format.
//!
//! Every dataset file holds one JSON object per line. Keys are written in
//! the declaration order of the record structs below, so writing the same
//! records twice produces byte-identical files.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Metadata = BTreeMap<String, String>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DocFormat {
    Txt,
    Markdown,
    Jsonl,
    Csv,
}

impl FromStr for DocFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "txt" | "text" => Ok(Self::Txt),
            "md" | "markdown" => Ok(Self::Markdown),
            "jsonl" | "json" => Ok(Self::Jsonl),
            "csv" => Ok(Self::Csv),
            other => Err(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub source_path: String,
    pub format: DocFormat,
    pub text: String,
    #[serde(default)]
    pub metadata: Metadata,
}

/// A token-window slice of a document. `token_span` is half-open.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub chunk_id: String,
    pub doc_id: String,
    pub ordinal: usize,
    pub token_span: [usize; 2],
    pub text: String,
    pub token_count: usize,
}

impl Chunk {
    pub fn make_id(doc_id: &str, ordinal: usize) -> String {
        format!("{doc_id}#{ordinal}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QAExample {
    pub example_id: String,
    pub query: String,
    #[serde(default)]
    pub answers: Vec<String>,
    #[serde(default)]
    pub gold_chunk_ids: Vec<String>,
    /// Keypoint strings for keypoint-recall rewards; the gold answers are
    /// used when this is empty.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub keypoints: Vec<String>,
    #[serde(default)]
    pub metadata: Metadata,
}

impl QAExample {
    pub fn effective_keypoints(&self) -> &[String] {
        if self.keypoints.is_empty() {
            &self.answers
        } else {
            &self.keypoints
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalPairExample {
    pub query: String,
    pub positive_chunk_ids: Vec<String>,
    #[serde(default)]
    pub negative_chunk_ids: Vec<String>,
    #[serde(default)]
    pub metadata: Metadata,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub prompt: String,
    pub chosen: String,
    pub rejected: String,
    pub chosen_reward: f64,
    pub rejected_reward: f64,
    #[serde(default)]
    pub metadata: Metadata,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnnotationRange {
    Short,
    Long,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SFTExample {
    pub prompt: String,
    pub response: String,
    pub annotation_range: AnnotationRange,
    #[serde(default)]
    pub metadata: Metadata,
}

/// Thresholds that depend on run configuration rather than the record alone.
#[derive(Debug, Clone, Copy)]
pub struct ValidationOptions {
    pub reward_gap_min: f64,
}

impl Default for ValidationOptions {
    fn default() -> Self {
        Self { reward_gap_min: 0.05 }
    }
}

/// Common behavior of the four dataset record kinds.
pub trait Record: Serialize + DeserializeOwned + Clone {
    const KIND: DatasetKind;
    const REQUIRED: &'static [&'static str];

    /// Invariant violations, empty when the record is valid.
    fn violations(&self, opts: &ValidationOptions) -> Vec<String>;
}

impl Record for QAExample {
    const KIND: DatasetKind = DatasetKind::Qa;
    const REQUIRED: &'static [&'static str] = &["example_id", "query"];

    fn violations(&self, _: &ValidationOptions) -> Vec<String> {
        let mut v = Vec::new();
        if self.query.trim().is_empty() {
            v.push("query must be non-empty".to_string());
        }
        if self.answers.is_empty() && self.gold_chunk_ids.is_empty() {
            v.push("answers may be empty only when gold_chunk_ids is non-empty".to_string());
        }
        v
    }
}

impl Record for RetrievalPairExample {
    const KIND: DatasetKind = DatasetKind::RetrievalPair;
    const REQUIRED: &'static [&'static str] = &["query", "positive_chunk_ids"];

    fn violations(&self, _: &ValidationOptions) -> Vec<String> {
        let mut v = Vec::new();
        if self.query.trim().is_empty() {
            v.push("query must be non-empty".to_string());
        }
        if self.positive_chunk_ids.is_empty() {
            v.push("positive_chunk_ids must be non-empty".to_string());
        }
        let pos: HashSet<&str> = self.positive_chunk_ids.iter().map(String::as_str).collect();
        for n in &self.negative_chunk_ids {
            if pos.contains(n.as_str()) {
                v.push(format!("chunk {n} is both positive and negative"));
            }
        }
        v
    }
}

impl Record for PreferencePair {
    const KIND: DatasetKind = DatasetKind::Preference;
    const REQUIRED: &'static [&'static str] =
        &["prompt", "chosen", "rejected", "chosen_reward", "rejected_reward"];

    fn violations(&self, opts: &ValidationOptions) -> Vec<String> {
        let mut v = Vec::new();
        for (name, r) in [("chosen_reward", self.chosen_reward), ("rejected_reward", self.rejected_reward)] {
            if !(0.0..=1.0).contains(&r) {
                v.push(format!("{name} {r} outside [0, 1]"));
            }
        }
        let gap = self.chosen_reward - self.rejected_reward;
        // small slack so that gaps computed in f64 and re-parsed still pass
        if gap < opts.reward_gap_min - 1e-12 {
            v.push(format!("reward gap {gap} below minimum {}", opts.reward_gap_min));
        }
        v
    }
}

impl Record for SFTExample {
    const KIND: DatasetKind = DatasetKind::Sft;
    const REQUIRED: &'static [&'static str] = &["prompt", "response", "annotation_range"];

    fn violations(&self, _: &ValidationOptions) -> Vec<String> {
        let mut v = Vec::new();
        if self.prompt.trim().is_empty() {
            v.push("prompt must be non-empty".to_string());
        }
        if self.response.trim().is_empty() {
            v.push("response must be non-empty".to_string());
        }
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Qa,
    RetrievalPair,
    Preference,
    Sft,
}

impl FromStr for DatasetKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "qa" => Ok(Self::Qa),
            "retrieval_pair" | "retrieval" => Ok(Self::RetrievalPair),
            "preference" | "dpo" => Ok(Self::Preference),
            "sft" => Ok(Self::Sft),
            other => Err(other.to_string()),
        }
    }
}

/// A dataset of any kind, as returned by [`read_dataset`].
#[derive(Debug, Clone, PartialEq)]
pub enum Dataset {
    Qa(Vec<QAExample>),
    RetrievalPair(Vec<RetrievalPairExample>),
    Preference(Vec<PreferencePair>),
    Sft(Vec<SFTExample>),
}

impl Dataset {
    pub fn len(&self) -> usize {
        match self {
            Dataset::Qa(r) => r.len(),
            Dataset::RetrievalPair(r) => r.len(),
            Dataset::Preference(r) => r.len(),
            Dataset::Sft(r) => r.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One problem found while reading a dataset file. Line numbers are 1-based.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RecordIssue {
    MalformedLine { line: usize, reason: String },
    MissingField { line: usize, field: String },
    InvariantViolation { line: usize, description: String },
}

impl fmt::Display for RecordIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RecordIssue::MalformedLine { line, reason } => write!(f, "line {line}: malformed line: {reason}"),
            RecordIssue::MissingField { line, field } => write!(f, "line {line}: missing field `{field}`"),
            RecordIssue::InvariantViolation { line, description } => {
                write!(f, "line {line}: invariant violation: {description}")
            }
        }
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{} invalid record(s); first: {}", .0.len(), .0[0])]
    Invalid(Vec<RecordIssue>),
}

impl DatasetError {
    pub fn issues(&self) -> &[RecordIssue] {
        match self {
            DatasetError::Invalid(v) => v,
            DatasetError::Io { .. } => &[],
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.display().to_string(), source }
}

/// Parses JSONL text into records, reporting every issue with its line
/// number. Blank lines are skipped.
pub fn parse_records<T: Record>(text: &str, opts: &ValidationOptions) -> Result<Vec<T>, DatasetError> {
    let mut out = Vec::new();
    let mut issues = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = match serde_json::from_str(raw) {
            Ok(v) => v,
            Err(e) => {
                issues.push(RecordIssue::MalformedLine { line, reason: e.to_string() });
                continue;
            }
        };
        let Some(obj) = value.as_object() else {
            issues.push(RecordIssue::MalformedLine { line, reason: "not a JSON object".into() });
            continue;
        };
        let mut missing = false;
        for field in T::REQUIRED {
            if !obj.contains_key(*field) {
                issues.push(RecordIssue::MissingField { line, field: field.to_string() });
                missing = true;
            }
        }
        if missing {
            // still report invariant problems visible in the fields that exist
            let mut patched = obj.clone();
            for field in T::REQUIRED {
                patched.entry(field.to_string()).or_insert_with(|| placeholder_for(field));
            }
            if let Ok(rec) = serde_json::from_value::<T>(serde_json::Value::Object(patched)) {
                for description in rec.violations(opts) {
                    issues.push(RecordIssue::InvariantViolation { line, description });
                }
            }
            continue;
        }
        match serde_json::from_value::<T>(value) {
            Ok(rec) => {
                let v = rec.violations(opts);
                if v.is_empty() {
                    out.push(rec);
                } else {
                    issues.extend(v.into_iter().map(|description| RecordIssue::InvariantViolation { line, description }));
                }
            }
            Err(e) => issues.push(RecordIssue::MalformedLine { line, reason: e.to_string() }),
        }
    }
    if issues.is_empty() {
        Ok(out)
    } else {
        Err(DatasetError::Invalid(issues))
    }
}

fn placeholder_for(field: &str) -> serde_json::Value {
    match field {
        "positive_chunk_ids" => serde_json::json!(["?"]),
        "chosen_reward" | "rejected_reward" => serde_json::json!(0.0),
        "annotation_range" => serde_json::json!("short"),
        _ => serde_json::json!("?"),
    }
}

pub fn read_records<T: Record>(path: &Path, opts: &ValidationOptions) -> Result<Vec<T>, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    parse_records(&text, opts)
}

/// Reads a dataset file of the given kind with default validation options.
pub fn read_dataset(path: &Path, kind: DatasetKind) -> Result<Dataset, DatasetError> {
    let opts = ValidationOptions::default();
    Ok(match kind {
        DatasetKind::Qa => Dataset::Qa(read_records(path, &opts)?),
        DatasetKind::RetrievalPair => Dataset::RetrievalPair(read_records(path, &opts)?),
        DatasetKind::Preference => Dataset::Preference(read_records(path, &opts)?),
        DatasetKind::Sft => Dataset::Sft(read_records(path, &opts)?),
    })
}

/// Serializes records as JSONL into `w`.
pub fn write_records_to<T: Serialize, W: Write>(records: &[T], mut w: W) -> std::io::Result<usize> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(records.len())
}

/// Writes records to `path`, one JSON object per line. Returns the count.
pub fn write_dataset<T: Serialize>(records: &[T], path: &Path) -> Result<usize, DatasetError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(io_err(path))?;
        }
    }
    let file = File::create(path).map_err(io_err(path))?;
    write_records_to(records, BufWriter::new(file)).map_err(io_err(path))
}

/// Streams a JSONL file line by line into raw JSON values.
pub fn read_json_lines(path: &Path) -> Result<Vec<(usize, serde_json::Value)>, DatasetError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    let mut issues = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_text = line.map_err(io_err(path))?;
        if line_text.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line_text) {
            Ok(v) => out.push((idx + 1, v)),
            Err(e) => issues.push(RecordIssue::MalformedLine { line: idx + 1, reason: e.to_string() }),
        }
    }
    if issues.is_empty() {
        Ok(out)
    } else {
        Err(DatasetError::Invalid(issues))
    }
}

/// A chunk id referenced by a retrieval pair that the knowledge base lacks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnresolvedReference {
    pub record_index: usize,
    pub chunk_id: String,
}

/// Flags every chunk id in `pairs` that `known` does not contain.
pub fn validate_references<'a>(
    pairs: &[RetrievalPairExample],
    known: impl Fn(&str) -> bool + 'a,
) -> Vec<UnresolvedReference> {
    let mut out = Vec::new();
    for (i, p) in pairs.iter().enumerate() {
        for id in p.positive_chunk_ids.iter().chain(&p.negative_chunk_ids) {
            if !known(id) {
                out.push(UnresolvedReference { record_index: i, chunk_id: id.clone() });
            }
        }
    }
    out
}

/// Hook for loading third-party benchmark formats into QA records.
pub trait DatasetConverter {
    fn name(&self) -> &str;
    fn convert(&self, input: &Path) -> Result<Vec<QAExample>, DatasetError>;
}

/// Runs a converter and writes its output in the unified format.
pub fn convert_dataset(conv: &dyn DatasetConverter, input: &Path, out: &Path) -> Result<usize, DatasetError> {
    let records = conv.convert(input)?;
    let opts = ValidationOptions::default();
    let issues: Vec<RecordIssue> = records
        .iter()
        .enumerate()
        .flat_map(|(i, r)| {
            r.violations(&opts)
                .into_iter()
                .map(move |description| RecordIssue::InvariantViolation { line: i + 1, description })
        })
        .collect();
    if !issues.is_empty() {
        return Err(DatasetError::Invalid(issues));
    }
    write_dataset(&records, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const LINE: &str = r#"{"example_id":"q1","query":"What is Article 51?","answers":["auction concluded"],"gold_chunk_ids":["law#12"]}"#;

    #[test]
    fn parses_qa_line() {
        let recs: Vec<QAExample> = parse_records(LINE, &Default::default()).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].example_id, "q1");
        assert_eq!(recs[0].query, "What is Article 51?");
        assert_eq!(recs[0].answers, vec!["auction concluded"]);
        assert_eq!(recs[0].gold_chunk_ids, vec!["law#12"]);
        assert!(recs[0].metadata.is_empty());
    }

    #[test]
    fn empty_query_reports_missing_field_and_violation() {
        let err = parse_records::<QAExample>("{\"query\":\"\"}", &Default::default()).unwrap_err();
        let issues = err.issues();
        assert!(issues.contains(&RecordIssue::MissingField { line: 1, field: "example_id".into() }));
        assert!(issues.iter().any(|i| matches!(i,
            RecordIssue::InvariantViolation { line: 1, description } if description.contains("query"))));
    }

    #[test]
    fn malformed_line_keeps_line_number() {
        let text = format!("{LINE}\n\nnot json\n");
        let err = parse_records::<QAExample>(&text, &Default::default()).unwrap_err();
        assert!(matches!(err.issues()[0], RecordIssue::MalformedLine { line: 3, .. }));
    }

    #[test]
    fn negatives_must_not_overlap_positives() {
        let line = r#"{"query":"q","positive_chunk_ids":["a#0"],"negative_chunk_ids":["a#0","b#1"]}"#;
        let err = parse_records::<RetrievalPairExample>(line, &Default::default()).unwrap_err();
        assert!(matches!(err.issues()[0], RecordIssue::InvariantViolation { line: 1, .. }));
    }

    #[test]
    fn preference_gap_checked() {
        let line = r#"{"prompt":"p","chosen":"a","rejected":"b","chosen_reward":0.5,"rejected_reward":0.48}"#;
        assert!(parse_records::<PreferencePair>(line, &Default::default()).is_err());
        let ok = ValidationOptions { reward_gap_min: 0.0 };
        assert_eq!(parse_records::<PreferencePair>(line, &ok).unwrap().len(), 1);
    }

    #[test]
    fn write_zero_and_three() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.jsonl");
        assert_eq!(write_dataset::<QAExample>(&[], &p).unwrap(), 0);
        assert_eq!(std::fs::read(&p).unwrap().len(), 0);

        let rec: QAExample = serde_json::from_str(LINE).unwrap();
        let p3 = dir.path().join("three.jsonl");
        assert_eq!(write_dataset(&[rec.clone(), rec.clone(), rec], &p3).unwrap(), 3);
        assert_eq!(std::fs::read_to_string(&p3).unwrap().lines().count(), 3);
    }

    #[test]
    fn field_order_is_fixed() {
        let rec: QAExample = serde_json::from_str(LINE).unwrap();
        let s = serde_json::to_string(&rec).unwrap();
        assert_eq!(
            s,
            r#"{"example_id":"q1","query":"What is Article 51?","answers":["auction concluded"],"gold_chunk_ids":["law#12"],"metadata":{}}"#
        );
    }

    #[test]
    fn unresolved_references_flagged() {
        let pairs = vec![RetrievalPairExample {
            query: "q".into(),
            positive_chunk_ids: vec!["a#0".into()],
            negative_chunk_ids: vec!["zz#9".into()],
            metadata: Metadata::new(),
        }];
        let bad = validate_references(&pairs, |id| id == "a#0");
        assert_eq!(bad, vec![UnresolvedReference { record_index: 0, chunk_id: "zz#9".into() }]);
    }

    fn qa_strategy() -> impl Strategy<Value = QAExample> {
        (
            "[a-z0-9]{1,8}",
            "\\PC{1,40}",
            prop::collection::vec("\\PC{0,20}", 1..4),
            prop::collection::vec("[a-z]{1,4}#[0-9]{1,2}", 0..3),
            prop::collection::btree_map("[a-z]{1,5}", "\\PC{0,10}", 0..3),
        )
            .prop_filter("non-blank query", |t| !t.1.trim().is_empty())
            .prop_map(|(id, q, answers, gold, metadata)| QAExample {
                example_id: id,
                query: q,
                answers,
                gold_chunk_ids: gold,
                keypoints: vec![],
                metadata,
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(20))]
        #[test]
        fn qa_round_trip(records in prop::collection::vec(qa_strategy(), 100)) {
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("qa.jsonl");
            write_dataset(&records, &p).unwrap();
            let back = read_dataset(&p, DatasetKind::Qa).unwrap();
            let first = std::fs::read(&p).unwrap();
            prop_assert_eq!(back, Dataset::Qa(records.clone()));
            write_dataset(&records, &p).unwrap();
            prop_assert_eq!(first, std::fs::read(&p).unwrap());
        }
    }
}
