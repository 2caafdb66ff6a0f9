//! Ranking and generation metrics.
//!
//! Ranking metrics use binary relevance: a retrieved id is relevant iff it
//! is in the gold set. Generation metrics compare case-folded token
//! sequences from the default tokenizer.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::tokenize::default_tokenizer;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalRunRecord {
    pub example_id: String,
    pub ranked_chunk_ids: Vec<String>,
    pub gold_chunk_ids: Vec<String>,
}

impl RetrievalRunRecord {
    fn gold(&self) -> HashSet<&str> {
        self.gold_chunk_ids.iter().map(String::as_str).collect()
    }
}

/// Reciprocal rank of the first gold id within the top `k`, 0 if none.
pub fn mrr_at_k(record: &RetrievalRunRecord, k: usize) -> f64 {
    let gold = record.gold();
    record
        .ranked_chunk_ids
        .iter()
        .take(k)
        .position(|id| gold.contains(id.as_str()))
        .map_or(0.0, |p| 1.0 / (p + 1) as f64)
}

/// DCG@k over binary gains with `log2(i + 1)` discounts, divided by the
/// ideal DCG over `min(|gold|, k)` leading positions.
pub fn ndcg_at_k(record: &RetrievalRunRecord, k: usize) -> f64 {
    let gold = record.gold();
    if gold.is_empty() || k == 0 {
        return 0.0;
    }
    let discount = |i: usize| 1.0 / ((i + 2) as f64).log2();
    let dcg: f64 = record
        .ranked_chunk_ids
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, id)| gold.contains(id.as_str()))
        .map(|(i, _)| discount(i))
        .sum();
    let idcg: f64 = (0..gold.len().min(k)).map(discount).sum();
    dcg / idcg
}

/// `|gold ∩ top-k| / |gold|`.
pub fn recall_at_k(record: &RetrievalRunRecord, k: usize) -> f64 {
    let gold = record.gold();
    if gold.is_empty() {
        return 0.0;
    }
    let found: HashSet<&str> =
        record.ranked_chunk_ids.iter().take(k).map(String::as_str).filter(|id| gold.contains(id)).collect();
    found.len() as f64 / gold.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
    /// Set when either side has no tokens; all scores are then 0.
    #[serde(default)]
    pub empty_input: bool,
}

/// Case-folded default-tokenizer tokens.
pub fn metric_tokens(text: &str) -> Vec<String> {
    default_tokenizer(text).into_iter().map(|t| t.to_lowercase()).collect()
}

/// Longest common subsequence length, O(|a|·|b|) time and O(|b|) space.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l_tokens<T: PartialEq>(candidate: &[T], reference: &[T]) -> RougeScore {
    if candidate.is_empty() || reference.is_empty() {
        return RougeScore { precision: 0.0, recall: 0.0, f: 0.0, empty_input: true };
    }
    let lcs = lcs_len(candidate, reference) as f64;
    let precision = lcs / candidate.len() as f64;
    let recall = lcs / reference.len() as f64;
    let f = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    RougeScore { precision, recall, f, empty_input: false }
}

pub fn rouge_l(candidate: &str, reference: &str) -> RougeScore {
    rouge_l_tokens(&metric_tokens(candidate), &metric_tokens(reference))
}

/// Best ROUGE-L F over several references (0 when there are none).
pub fn rouge_l_max(candidate: &str, references: &[String]) -> f64 {
    references.iter().map(|r| rouge_l(candidate, r).f).fold(0.0, f64::max)
}

/// 1.0 when the case-folded token sequences are identical.
pub fn exact_match(candidate: &str, reference: &str) -> f64 {
    if metric_tokens(candidate) == metric_tokens(reference) {
        1.0
    } else {
        0.0
    }
}

/// Bag-of-tokens F1.
pub fn token_f1(candidate: &str, reference: &str) -> f64 {
    let c = metric_tokens(candidate);
    let r = metric_tokens(reference);
    if c.is_empty() || r.is_empty() {
        return if c.is_empty() && r.is_empty() { 1.0 } else { 0.0 };
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &r {
        *counts.entry(t.as_str()).or_default() += 1;
    }
    let mut common = 0usize;
    for t in &c {
        if let Some(n) = counts.get_mut(t.as_str()) {
            if *n > 0 {
                *n -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let p = common as f64 / c.len() as f64;
    let rc = common as f64 / r.len() as f64;
    2.0 * p * rc / (p + rc)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(ranked: &[&str], gold: &[&str]) -> RetrievalRunRecord {
        RetrievalRunRecord {
            example_id: "e".into(),
            ranked_chunk_ids: ranked.iter().map(|s| s.to_string()).collect(),
            gold_chunk_ids: gold.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn mrr_examples() {
        assert_eq!(mrr_at_k(&rec(&["g", "x"], &["g"]), 10), 1.0);
        let ranked11: Vec<String> = (0..10).map(|i| format!("x{i}")).chain(["g".to_string()]).collect();
        let r = RetrievalRunRecord { example_id: "e".into(), ranked_chunk_ids: ranked11, gold_chunk_ids: vec!["g".into()] };
        assert_eq!(mrr_at_k(&r, 10), 0.0);
        let mean = (mrr_at_k(&rec(&["g"], &["g"]), 10)
            + mrr_at_k(&rec(&["a", "b", "g"], &["g"]), 10)
            + mrr_at_k(&rec(&["a", "b"], &["g"]), 10))
            / 3.0;
        assert!((mean - 4.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn ndcg_examples() {
        let v = ndcg_at_k(&rec(&["g1", "x", "g2"], &["g1", "g2"]), 10);
        // DCG = 1 + 1/2, IDCG = 1 + 1/log2(3)
        let expected = 1.5 / (1.0 + 1.0 / 3f64.log2());
        assert!((v - expected).abs() < 1e-12);
        assert!((v - 0.9197).abs() < 1e-4);
        assert_eq!(ndcg_at_k(&rec(&["g1", "g2"], &["g1", "g2"]), 10), 1.0);
        assert_eq!(ndcg_at_k(&rec(&["x"], &["g1"]), 10), 0.0);
    }

    #[test]
    fn recall_examples() {
        assert_eq!(recall_at_k(&rec(&["a", "b", "x"], &["a", "b", "c", "d"]), 10), 0.5);
        assert_eq!(recall_at_k(&rec(&["a", "b"], &["a", "b"]), 2), 1.0);
    }

    #[test]
    fn rouge_examples() {
        assert_eq!(rouge_l("the cat sat", "the cat sat").f, 1.0);
        let s = rouge_l("a c d", "a b c d");
        assert_eq!(s.precision, 1.0);
        assert_eq!(s.recall, 0.75);
        assert!((s.f - 6.0 / 7.0).abs() < 1e-12);
        assert_eq!(rouge_l("x y", "a b").f, 0.0);
        assert!(rouge_l("", "a").empty_input);
        assert_eq!(rouge_l("The Cat", "the cat").f, 1.0);
    }

    #[test]
    fn rouge_on_cjk_characters() {
        let s = rouge_l("拍卖成交", "拍卖已成交");
        assert_eq!(s.precision, 1.0);
        assert_eq!(s.recall, 0.8);
    }

    #[test]
    fn f1_and_em() {
        assert_eq!(exact_match("Paris.", "paris ."), 1.0);
        assert_eq!(exact_match("Paris", "London"), 0.0);
        assert!((token_f1("a b c", "a b d") - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(token_f1("x", "y"), 0.0);
    }
}
